"""Chunked imitation policy over per-keypoint tokens.

Each robot keypoint, each object keypoint, the gripper bit, and the force
channel become one token holding its flattened length-L history (scalar
channels are repeated 3x per step to match point dimensionality). A shared
MLP embeds tokens, a small non-causal transformer mixes them, and linear
heads emit an H-step chunk: future tracks per robot point, a gripper
logit, and a force target. Training minimizes mean squared error on all
three outputs; inference blends overlapping chunks with exponential
temporal averaging.

Implemented directly on float64 numpy with hand-written backprop: runs are
bitwise reproducible from a seed, and the analytic gradients are checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .demofile import Demonstration
from .errors import ContractError
from .geometry import RigidTransform, encode_rotation6d
from .retarget import KeypointLayout, keypoints_to_pose
from .rngutil import STREAM_INIT, STREAM_TRAIN, substream

MODEL_MAGIC = b"TFPOLICY"
MODEL_VERSION = 1

# Exponential temporal-averaging decay: weight exp(-decay * age) for a
# prediction made `age` steps ago.
DEFAULT_TEMPORAL_DECAY = 0.1

_LN_EPS = 1e-6


@dataclass(frozen=True)
class PolicyConfig:
    """Shapes and hyperparameters of the policy network."""

    n_robot: int
    m_object: int
    history: int = 2          # L: observation history per token
    horizon: int = 10         # H: predicted chunk length
    width: int = 64
    depth: int = 2
    heads: int = 4
    ffn_width: int = 128
    mask_force: bool = False  # zero the force token's input (ablation flag)

    def __post_init__(self):
        if self.n_robot < 1 or self.m_object < 0:
            raise ContractError("need n_robot >= 1 and m_object >= 0")
        if self.history < 1 or self.horizon < 1:
            raise ContractError("history and horizon must be >= 1")
        if self.width % self.heads != 0:
            raise ContractError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def token_count(self) -> int:
        return self.n_robot + self.m_object + 2

    @property
    def token_dim(self) -> int:
        return 3 * self.history

    @property
    def gripper_token(self) -> int:
        return self.n_robot + self.m_object

    @property
    def force_token(self) -> int:
        return self.n_robot + self.m_object + 1


@dataclass(frozen=True)
class Normalization:
    """Dataset statistics stored with the model and applied at inference."""

    pos_mean: np.ndarray
    pos_std: np.ndarray
    force_scale: float = 0.01

    def __post_init__(self):
        mean = np.array(self.pos_mean, dtype=float).reshape(3)
        std = np.array(self.pos_std, dtype=float).reshape(3)
        if np.any(std <= 0):
            raise ContractError("position std must be positive")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "pos_mean", mean)
        object.__setattr__(self, "pos_std", std)


def fit_normalization(demos: Sequence[Demonstration]) -> Normalization:
    """Per-axis position statistics over all robot and object keypoints."""
    if not demos:
        raise ContractError("cannot fit normalization on an empty demo set")
    pts = np.concatenate(
        [d.robot_keypoints.reshape(-1, 3) for d in demos]
        + [d.object_keypoints.reshape(-1, 3) for d in demos if d.m_object]
    )
    std = pts.std(axis=0)
    return Normalization(pos_mean=pts.mean(axis=0), pos_std=np.maximum(std, 1e-6))


@dataclass(frozen=True)
class ObservationWindow:
    """Aligned length-L histories of the policy inputs (world units)."""

    robot: np.ndarray    # (L, N, 3)
    object: np.ndarray   # (L, M, 3)
    gripper: np.ndarray  # (L,)
    force: np.ndarray    # (L,)

    def __post_init__(self):
        r = np.asarray(self.robot, dtype=float)
        o = np.asarray(self.object, dtype=float)
        g = np.asarray(self.gripper, dtype=float)
        f = np.asarray(self.force, dtype=float)
        if r.ndim != 3 or r.shape[0] == 0:
            raise ContractError("window must hold at least one frame of robot keypoints")
        length = r.shape[0]
        if o.ndim != 3 or o.shape[0] != length or g.shape != (length,) or f.shape != (length,):
            raise ContractError("window histories are misaligned")
        object.__setattr__(self, "robot", r)
        object.__setattr__(self, "object", o)
        object.__setattr__(self, "gripper", g)
        object.__setattr__(self, "force", f)

    @property
    def length(self) -> int:
        return self.robot.shape[0]


def window_from_history(frames, length: int) -> ObservationWindow:
    """Build a window from the most recent observations, replicating the
    first frame when the episode is younger than the history length."""
    if not frames:
        raise ContractError("history is empty")
    recent = list(frames)[-length:]
    while len(recent) < length:
        recent.insert(0, recent[0])
    return ObservationWindow(
        robot=np.stack([f.robot_keypoints for f in recent]),
        object=np.stack([f.object_keypoints for f in recent]),
        gripper=np.array([f.gripper for f in recent], dtype=float),
        force=np.array([f.force for f in recent], dtype=float),
    )


def tokenize(window: ObservationWindow) -> np.ndarray:
    """Restructure a window into the token matrix (token_count, 3L).

    Token order: robot points, object points, gripper, force. Point tokens
    flatten their (L, 3) history; the two scalar channels repeat each value
    3x per step before flattening, matching point dimensionality.
    """
    length = window.length
    robot = np.transpose(window.robot, (1, 0, 2)).reshape(-1, 3 * length)
    obj = np.transpose(window.object, (1, 0, 2)).reshape(-1, 3 * length)
    grip = np.repeat(window.gripper, 3)[None, :]
    force = np.repeat(window.force, 3)[None, :]
    return np.concatenate([robot, obj, grip, force], axis=0)


@dataclass(frozen=True)
class ActionChunk:
    """H future steps: robot point tracks, gripper logit, force target."""

    tracks: np.ndarray   # (H, N, 3)
    gripper: np.ndarray  # (H,)
    force: np.ndarray    # (H,)

    def __post_init__(self):
        t = np.asarray(self.tracks, dtype=float)
        g = np.asarray(self.gripper, dtype=float)
        f = np.asarray(self.force, dtype=float)
        if t.ndim != 3 or t.shape[0] != g.shape[0] or f.shape != g.shape:
            raise ContractError("chunk channels are misaligned")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(g)) and np.all(np.isfinite(f))):
            raise ContractError("chunk contains non-finite values")
        object.__setattr__(self, "tracks", t)
        object.__setattr__(self, "gripper", g)
        object.__setattr__(self, "force", f)

    @property
    def horizon(self) -> int:
        return self.gripper.shape[0]


# -- network primitives ----------------------------------------------------


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layernorm_bwd(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xhat, axis=axes)
    db = np.sum(dy, axis=axes)
    dxh = dy * g
    m1 = dxh.mean(axis=-1, keepdims=True)
    m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxh - m1 - xhat * m2), dg, db


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class PolicyNet:
    """Token transformer with deterministic heads; float64 throughout."""

    def __init__(self, config: PolicyConfig, norm: Normalization, params: dict):
        self.config = config
        self.norm = norm
        self.params = params

    # -- construction ------------------------------------------------------

    @classmethod
    def initialize(cls, config: PolicyConfig, norm: Normalization, seed: int = 0) -> "PolicyNet":
        rng = substream(seed, STREAM_INIT)
        p = {}

        def dense(name, nin, nout):
            p[f"{name}.w"] = rng.standard_normal((nin, nout)) / np.sqrt(nin)
            p[f"{name}.b"] = np.zeros(nout)

        d = config.width
        dense("emb.l1", config.token_dim, d)
        dense("emb.l2", d, d)
        p["pos"] = 0.02 * rng.standard_normal((config.token_count, d))
        for i in range(config.depth):
            p[f"blk{i}.ln1.g"] = np.ones(d)
            p[f"blk{i}.ln1.b"] = np.zeros(d)
            for nm in ("q", "k", "v", "o"):
                dense(f"blk{i}.attn.{nm}", d, d)
            p[f"blk{i}.ln2.g"] = np.ones(d)
            p[f"blk{i}.ln2.b"] = np.zeros(d)
            dense(f"blk{i}.ffn.l1", d, config.ffn_width)
            dense(f"blk{i}.ffn.l2", config.ffn_width, d)
        p["final.g"] = np.ones(d)
        p["final.b"] = np.zeros(d)
        dense("head.track", d, config.horizon * 3)
        dense("head.grip", d, config.horizon)
        dense("head.force", d, config.horizon)
        return cls(config, norm, p)

    @classmethod
    def zeros(cls, config: PolicyConfig, norm: Normalization) -> "PolicyNet":
        net = cls.initialize(config, norm, seed=0)
        net.params = {k: np.zeros_like(v) for k, v in net.params.items()}
        return net

    # -- forward/backward ---------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        x = np.asarray(tokens, dtype=float)
        if x.ndim == 2:
            x = x[None]
        cfg = self.config
        if x.shape[1] != cfg.token_count or x.shape[2] != cfg.token_dim:
            raise ContractError(
                f"tokens must be (batch, {cfg.token_count}, {cfg.token_dim}), got {x.shape}"
            )
        return x

    def forward(self, tokens):
        """Normalized-space outputs (tracks, gripper, force) for a batch."""
        out, _ = self._forward(self._check_tokens(tokens), need_cache=False)
        return out

    def _forward(self, x, need_cache: bool):
        cfg, p = self.config, self.params
        cache = {} if need_cache else None
        if cfg.mask_force:
            x = x.copy()
            x[:, cfg.force_token, :] = 0.0

        z1 = x @ p["emb.l1.w"] + p["emb.l1.b"]
        a1 = np.maximum(z1, 0.0)
        h = a1 @ p["emb.l2.w"] + p["emb.l2.b"] + p["pos"]
        if need_cache:
            cache["emb"] = (x, z1, a1)

        nh = cfg.heads
        dh = cfg.width // nh
        scale = 1.0 / np.sqrt(dh)
        for i in range(cfg.depth):
            ln1, c_ln1 = _layernorm_fwd(h, p[f"blk{i}.ln1.g"], p[f"blk{i}.ln1.b"])
            q = ln1 @ p[f"blk{i}.attn.q.w"] + p[f"blk{i}.attn.q.b"]
            k = ln1 @ p[f"blk{i}.attn.k.w"] + p[f"blk{i}.attn.k.b"]
            v = ln1 @ p[f"blk{i}.attn.v.w"] + p[f"blk{i}.attn.v.b"]
            b, t, d = q.shape
            qh = q.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            kh = k.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            vh = v.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            att = _softmax(scale * (qh @ kh.transpose(0, 1, 3, 2)))
            oh = att @ vh
            o = oh.transpose(0, 2, 1, 3).reshape(b, t, d)
            attn_out = o @ p[f"blk{i}.attn.o.w"] + p[f"blk{i}.attn.o.b"]
            h_attn = h + attn_out

            ln2, c_ln2 = _layernorm_fwd(h_attn, p[f"blk{i}.ln2.g"], p[f"blk{i}.ln2.b"])
            zf = ln2 @ p[f"blk{i}.ffn.l1.w"] + p[f"blk{i}.ffn.l1.b"]
            af = np.maximum(zf, 0.0)
            h = h_attn + af @ p[f"blk{i}.ffn.l2.w"] + p[f"blk{i}.ffn.l2.b"]
            if need_cache:
                cache[f"blk{i}"] = (c_ln1, ln1, qh, kh, vh, att, o, c_ln2, ln2, zf, af)

        y, c_fin = _layernorm_fwd(h, p["final.g"], p["final.b"])
        if need_cache:
            cache["final"] = c_fin
            cache["y"] = y

        n, m, hor = cfg.n_robot, cfg.m_object, cfg.horizon
        y_robot = y[:, :n, :]
        tracks = (y_robot @ p["head.track.w"] + p["head.track.b"]).reshape(-1, n, hor, 3)
        tracks = tracks.transpose(0, 2, 1, 3)
        grip = y[:, cfg.gripper_token, :] @ p["head.grip.w"] + p["head.grip.b"]
        force = y[:, cfg.force_token, :] @ p["head.force.w"] + p["head.force.b"]
        return (tracks, grip, force), cache

    def _backward(self, cache, d_tracks, d_grip, d_force):
        cfg, p = self.config, self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        n, hor = cfg.n_robot, cfg.horizon
        y = cache["y"]
        b = y.shape[0]

        dy = np.zeros_like(y)
        dt = np.ascontiguousarray(d_tracks.transpose(0, 2, 1, 3)).reshape(b, n, hor * 3)
        y_robot = y[:, :n, :]
        grads["head.track.w"] = y_robot.reshape(-1, cfg.width).T @ dt.reshape(-1, hor * 3)
        grads["head.track.b"] = dt.sum(axis=(0, 1))
        dy[:, :n, :] = dt @ p["head.track.w"].T
        grads["head.grip.w"] = y[:, cfg.gripper_token, :].T @ d_grip
        grads["head.grip.b"] = d_grip.sum(axis=0)
        dy[:, cfg.gripper_token, :] = d_grip @ p["head.grip.w"].T
        grads["head.force.w"] = y[:, cfg.force_token, :].T @ d_force
        grads["head.force.b"] = d_force.sum(axis=0)
        dy[:, cfg.force_token, :] = d_force @ p["head.force.w"].T

        dh, grads["final.g"], grads["final.b"] = _layernorm_bwd(dy, cache["final"])

        nhead = cfg.heads
        dhd = cfg.width // nhead
        scale = 1.0 / np.sqrt(dhd)
        for i in reversed(range(cfg.depth)):
            c_ln1, ln1, qh, kh, vh, att, o, c_ln2, ln2, zf, af = cache[f"blk{i}"]
            bsz, t, d = ln1.shape

            # ffn branch
            daf = dh @ p[f"blk{i}.ffn.l2.w"].T
            grads[f"blk{i}.ffn.l2.w"] = af.reshape(-1, af.shape[-1]).T @ dh.reshape(-1, d)
            grads[f"blk{i}.ffn.l2.b"] = dh.sum(axis=(0, 1))
            dzf = daf * (zf > 0)
            grads[f"blk{i}.ffn.l1.w"] = ln2.reshape(-1, d).T @ dzf.reshape(-1, dzf.shape[-1])
            grads[f"blk{i}.ffn.l1.b"] = dzf.sum(axis=(0, 1))
            dln2 = dzf @ p[f"blk{i}.ffn.l1.w"].T
            dh_attn, grads[f"blk{i}.ln2.g"], grads[f"blk{i}.ln2.b"] = _layernorm_bwd(dln2, c_ln2)
            dh_attn = dh_attn + dh

            # attention branch
            do = dh_attn @ p[f"blk{i}.attn.o.w"].T
            grads[f"blk{i}.attn.o.w"] = o.reshape(-1, d).T @ dh_attn.reshape(-1, d)
            grads[f"blk{i}.attn.o.b"] = dh_attn.sum(axis=(0, 1))
            doh = do.reshape(bsz, t, nhead, dhd).transpose(0, 2, 1, 3)
            datt = doh @ vh.transpose(0, 1, 3, 2)
            dvh = att.transpose(0, 1, 3, 2) @ doh
            dscore = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
            dqh = scale * (dscore @ kh)
            dkh = scale * (dscore.transpose(0, 1, 3, 2) @ qh)

            dq = dqh.transpose(0, 2, 1, 3).reshape(bsz, t, d)
            dk = dkh.transpose(0, 2, 1, 3).reshape(bsz, t, d)
            dv = dvh.transpose(0, 2, 1, 3).reshape(bsz, t, d)
            dln1 = np.zeros_like(ln1)
            for nm, dz in (("q", dq), ("k", dk), ("v", dv)):
                grads[f"blk{i}.attn.{nm}.w"] = ln1.reshape(-1, d).T @ dz.reshape(-1, d)
                grads[f"blk{i}.attn.{nm}.b"] = dz.sum(axis=(0, 1))
                dln1 += dz @ p[f"blk{i}.attn.{nm}.w"].T
            dres, grads[f"blk{i}.ln1.g"], grads[f"blk{i}.ln1.b"] = _layernorm_bwd(dln1, c_ln1)
            dh = dh_attn + dres

        grads["pos"] = dh.sum(axis=0)
        x, z1, a1 = cache["emb"]
        grads["emb.l2.w"] = a1.reshape(-1, a1.shape[-1]).T @ dh.reshape(-1, cfg.width)
        grads["emb.l2.b"] = dh.sum(axis=(0, 1))
        da1 = dh @ p["emb.l2.w"].T
        dz1 = da1 * (z1 > 0)
        grads["emb.l1.w"] = x.reshape(-1, cfg.token_dim).T @ dz1.reshape(-1, cfg.width)
        grads["emb.l1.b"] = dz1.sum(axis=(0, 1))
        return grads

    # -- prediction ----------------------------------------------------------

    def predict(self, window: ObservationWindow) -> ActionChunk:
        """Denormalized action chunk for one observation window."""
        cfg = self.config
        if window.robot.shape[1] != cfg.n_robot or window.object.shape[1] != cfg.m_object:
            raise ContractError("window keypoint counts do not match the policy config")
        if window.length != cfg.history:
            window = window_from_history(
                [_Frame(window.robot[i], window.object[i], window.gripper[i], window.force[i])
                 for i in range(window.length)],
                cfg.history,
            )
        tokens = tokenize(normalize_window(window, self.norm))
        (tracks, grip, force), _ = self._forward(tokens[None], need_cache=False)
        return ActionChunk(
            tracks=tracks[0] * self.norm.pos_std + self.norm.pos_mean,
            gripper=grip[0],
            force=force[0] / self.norm.force_scale,
        )


@dataclass(frozen=True)
class _Frame:
    robot_keypoints: np.ndarray
    object_keypoints: np.ndarray
    gripper: float
    force: float


def normalize_window(window: ObservationWindow, norm: Normalization) -> ObservationWindow:
    return ObservationWindow(
        robot=(window.robot - norm.pos_mean) / norm.pos_std,
        object=(window.object - norm.pos_mean) / norm.pos_std
        if window.object.size
        else window.object,
        gripper=window.gripper,
        force=window.force * norm.force_scale,
    )


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Adam on the chunk MSE. Plain gradient descent with momentum needs
    roughly 30x more steps for the same overfit quality on this problem,
    so Adam is the default trainer; beta1 plays the momentum role."""

    steps: int = 4000
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ContractError("steps and batch_size must be >= 1")
        if self.learning_rate <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ContractError("bad optimizer constants")


def build_training_set(demos: Sequence[Demonstration], config: PolicyConfig, norm: Normalization):
    """Token/target arrays for every timestep of every demo.

    The window ending at step t is paired with the states at t+1 .. t+H
    (clamped at the final step), i.e. chunk element i is the desired state
    i+1 steps ahead.
    """
    if not demos:
        raise ContractError("training needs at least one demonstration")
    xs, yt, yg, yf = [], [], [], []
    length, hor = config.history, config.horizon
    for demo in demos:
        if demo.n_robot != config.n_robot or demo.m_object != config.m_object:
            raise ContractError(
                f"demo shapes (N={demo.n_robot}, M={demo.m_object}) do not match config"
            )
        rk = (demo.robot_keypoints - norm.pos_mean) / norm.pos_std
        ok = (demo.object_keypoints - norm.pos_mean) / norm.pos_std
        fr = demo.force * norm.force_scale
        gr = demo.gripper
        t_total = demo.length
        for t in range(t_total):
            lo = max(0, t - length + 1)
            idx = [lo] * (length - (t - lo + 1)) + list(range(lo, t + 1))
            tgt = np.minimum(np.arange(t + 1, t + hor + 1), t_total - 1)
            window = ObservationWindow(robot=rk[idx], object=ok[idx], gripper=gr[idx], force=fr[idx])
            xs.append(tokenize(window))
            yt.append(rk[tgt])
            yg.append(gr[tgt])
            yf.append(fr[tgt])
    return np.stack(xs), np.stack(yt), np.stack(yg), np.stack(yf)


def chunk_loss(pred, target) -> float:
    """Unit-weight sum of per-channel-group MSEs."""
    (pt, pg, pf), (tt, tg, tf) = pred, target
    return float(np.mean((pt - tt) ** 2) + np.mean((pg - tg) ** 2) + np.mean((pf - tf) ** 2))


def loss_and_grads(net: PolicyNet, tokens, targets):
    """MSE loss and its analytic parameter gradients for one batch."""
    (pt, pg, pf), cache = net._forward(net._check_tokens(tokens), need_cache=True)
    tt, tg, tf = targets
    loss = chunk_loss((pt, pg, pf), (tt, tg, tf))
    grads = net._backward(
        cache,
        (2.0 / pt.size) * (pt - tt),
        (2.0 / pg.size) * (pg - tg),
        (2.0 / pf.size) * (pf - tf),
    )
    return loss, grads


def train(net: PolicyNet, demos: Sequence[Demonstration], config: TrainConfig):
    """Minimize the chunk MSE with Adam.

    Mutates the net's parameters in place (single writer) and returns
    (net, per_epoch_losses). Deterministic for a fixed seed: batching,
    shuffling, and arithmetic are all seeded float64 numpy.
    """
    xs, yt, yg, yf = build_training_set(demos, net.config, net.norm)
    n_samples = xs.shape[0]
    rng = substream(config.seed, STREAM_TRAIN)
    m = {k: np.zeros_like(v) for k, v in net.params.items()}
    v = {k: np.zeros_like(v) for k, v in net.params.items()}
    losses = []
    steps_done = 0
    batch = min(config.batch_size, n_samples)
    while steps_done < config.steps:
        order = rng.permutation(n_samples)
        epoch_losses = []
        for start in range(0, n_samples, batch):
            if steps_done >= config.steps:
                break
            sel = order[start : start + batch]
            loss, grads = loss_and_grads(net, xs[sel], (yt[sel], yg[sel], yf[sel]))
            steps_done += 1
            c1 = 1.0 - config.beta1**steps_done
            c2 = 1.0 - config.beta2**steps_done
            for key, g in grads.items():
                m[key] = config.beta1 * m[key] + (1.0 - config.beta1) * g
                v[key] = config.beta2 * v[key] + (1.0 - config.beta2) * g * g
                net.params[key] -= config.learning_rate * (m[key] / c1) / (np.sqrt(v[key] / c2) + config.adam_eps)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return net, losses


def train_policy(
    demos: Sequence[Demonstration],
    policy_config: PolicyConfig,
    train_config: TrainConfig,
) -> tuple[PolicyNet, list]:
    """Initialize from the demos' statistics and train."""
    if not demos:
        raise ContractError("training needs at least one demonstration")
    norm = fit_normalization(demos)
    net = PolicyNet.initialize(policy_config, norm, seed=train_config.seed)
    return train(net, demos, train_config)


# -- temporal aggregation & action parsing -----------------------------------


@dataclass(frozen=True)
class StepAction:
    """One aggregated action: target robot points, gripper logit, force."""

    points: np.ndarray
    gripper: float
    force: float


def temporal_aggregate(entries, decay: float = DEFAULT_TEMPORAL_DECAY) -> StepAction:
    """Blend predictions for one step, weighted exp(-decay * age).

    ``entries`` holds (StepAction, age) pairs where age counts how many
    steps ago the prediction was made (0 = newest).
    """
    entries = list(entries)
    if not entries:
        raise ContractError("no chunk covers the requested step")
    weights = np.array([np.exp(-decay * age) for _, age in entries])
    weights /= weights.sum()
    # Anchor on the first entry and average the differences: identical
    # inputs reproduce themselves exactly (no renormalization residue).
    base = entries[0][0]
    points = base.points + sum(w * (a.points - base.points) for (a, _), w in zip(entries, weights))
    grip = base.gripper + sum(w * (a.gripper - base.gripper) for (a, _), w in zip(entries, weights))
    force = base.force + sum(w * (a.force - base.force) for (a, _), w in zip(entries, weights))
    return StepAction(points=points, gripper=float(grip), force=float(force))


class ChunkBuffer:
    """Rolling store of recent chunks for per-step temporal averaging."""

    def __init__(self, decay: float = DEFAULT_TEMPORAL_DECAY):
        self.decay = decay
        self._chunks = []  # (made_at, ActionChunk)

    def push(self, step: int, chunk: ActionChunk) -> None:
        self._chunks.append((step, chunk))
        horizon = chunk.horizon
        self._chunks = [(s, c) for s, c in self._chunks if s + horizon > step]

    def action_for(self, step: int) -> StepAction:
        entries = []
        for made_at, chunk in self._chunks:
            i = step - made_at
            if 0 <= i < chunk.horizon:
                entries.append(
                    (StepAction(chunk.tracks[i], float(chunk.gripper[i]), float(chunk.force[i])), i)
                )
        entries.sort(key=lambda e: e[1])
        return temporal_aggregate(entries, self.decay)


@dataclass(frozen=True)
class ParsedAction:
    """Controller-facing decomposition of an aggregated action."""

    force: float
    force_clamped: bool
    gripper_logit: float
    eef_pose: RigidTransform
    orientation6d: np.ndarray


def parse_action(action: StepAction, layout: KeypointLayout, initial_orientation) -> ParsedAction:
    """Split an aggregated action into (force target, gripper logit, pose).

    The end-effector pose comes from the predicted robot points via the
    layout; degenerate point sets raise DegeneracyError (the rollout
    records the episode as failed). Negative force targets clamp to zero.
    """
    pose = keypoints_to_pose(action.points, layout, initial_orientation)
    clamped = action.force < 0.0
    return ParsedAction(
        force=max(0.0, float(action.force)),
        force_clamped=bool(clamped),
        gripper_logit=float(action.gripper),
        eef_pose=pose,
        orientation6d=encode_rotation6d(pose.rotation),
    )


# -- model files --------------------------------------------------------------


def save_model(net: PolicyNet, path) -> None:
    """Self-describing binary container; bytewise deterministic."""
    from .fileio import atomic_write_bytes

    names = sorted(net.params)
    header = {
        "version": MODEL_VERSION,
        "config": {
            "n_robot": net.config.n_robot,
            "m_object": net.config.m_object,
            "history": net.config.history,
            "horizon": net.config.horizon,
            "width": net.config.width,
            "depth": net.config.depth,
            "heads": net.config.heads,
            "ffn_width": net.config.ffn_width,
            "mask_force": net.config.mask_force,
        },
        "normalization": {
            "pos_mean": list(net.norm.pos_mean),
            "pos_std": list(net.norm.pos_std),
            "force_scale": net.norm.force_scale,
        },
        "params": [{"name": n, "shape": list(net.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION), struct.pack("<Q", len(blob)), blob]
    for name in names:
        parts.append(np.ascontiguousarray(net.params[name], dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_model(path) -> PolicyNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ContractError(f"{path}: not a policy model file")
    off = len(MODEL_MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != MODEL_VERSION:
        raise ContractError(f"{path}: unsupported model version {version}")
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    config = PolicyConfig(**header["config"])
    nz = header["normalization"]
    norm = Normalization(
        pos_mean=np.array(nz["pos_mean"]),
        pos_std=np.array(nz["pos_std"]),
        force_scale=float(nz["force_scale"]),
    )
    params = {}
    for meta in header["params"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        params[meta["name"]] = arr.astype(float)
        off += 8 * count
    if off != len(data):
        raise ContractError(f"{path}: trailing bytes in model file")
    return PolicyNet(config, norm, params)
