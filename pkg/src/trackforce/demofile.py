"""Demonstration container and its line-delimited file format.

One step per line: timestamp, N robot keypoints, M object keypoints,
gripper bit, force (sensor-norm units). A JSON header line pins the schema
version and shapes, so files are self-describing, streamable, and
diff-able. Floats are written in shortest round-trip form: write -> read
is lossless and bytewise reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .fileio import atomic_write_text, fmt_float, fmt_row

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Demonstration:
    """One training sequence: per-step scene keypoints, gripper, and force."""

    robot_keypoints: np.ndarray   # (T, N, 3)
    object_keypoints: np.ndarray  # (T, M, 3)
    gripper: np.ndarray           # (T,) in {0, 1}
    force: np.ndarray             # (T,) sensor-norm units, >= 0
    timestamps: np.ndarray        # (T,) seconds
    task: str = ""
    seed: int = 0
    fps: float = 30.0

    def __post_init__(self):
        rkp = np.array(self.robot_keypoints, dtype=float)
        okp = np.array(self.object_keypoints, dtype=float)
        grip = np.array(self.gripper, dtype=float)
        force = np.array(self.force, dtype=float)
        ts = np.array(self.timestamps, dtype=float)
        if rkp.ndim != 3 or rkp.shape[2] != 3:
            raise ContractError(f"robot keypoints must be (T, N, 3), got {rkp.shape}")
        t = rkp.shape[0]
        if t == 0:
            raise ContractError("demonstration must contain at least one step")
        if okp.ndim != 3 or okp.shape[0] != t or okp.shape[2] != 3:
            raise ContractError(f"object keypoints must be (T, M, 3) with T={t}, got {okp.shape}")
        for name, arr in (("gripper", grip), ("force", force), ("timestamps", ts)):
            if arr.shape != (t,):
                raise ContractError(f"{name} must have shape ({t},), got {arr.shape}")
        if np.any(force < 0):
            raise ContractError("force channel must be non-negative")
        if not np.all(np.isin(grip, (0.0, 1.0))):
            raise ContractError("gripper channel must be binary")
        for arr in (rkp, okp, grip, force, ts):
            arr.flags.writeable = False
        object.__setattr__(self, "robot_keypoints", rkp)
        object.__setattr__(self, "object_keypoints", okp)
        object.__setattr__(self, "gripper", grip)
        object.__setattr__(self, "force", force)
        object.__setattr__(self, "timestamps", ts)

    @property
    def length(self) -> int:
        return self.robot_keypoints.shape[0]

    @property
    def n_robot(self) -> int:
        return self.robot_keypoints.shape[1]

    @property
    def m_object(self) -> int:
        return self.object_keypoints.shape[1]


def write_demo(demo: Demonstration, path) -> None:
    header = {
        "schema": SCHEMA_VERSION,
        "kind": "demo",
        "n_robot": demo.n_robot,
        "m_object": demo.m_object,
        "fps": demo.fps,
        "task": demo.task,
        "seed": demo.seed,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for t in range(demo.length):
        cols = [fmt_float(demo.timestamps[t]), fmt_row(demo.robot_keypoints[t])]
        if demo.m_object:
            cols.append(fmt_row(demo.object_keypoints[t]))
        cols.append(fmt_float(demo.gripper[t]))
        cols.append(fmt_float(demo.force[t]))
        lines.append(" ".join(cols))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_demo(path) -> Demonstration:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first:
            raise ContractError(f"{path}: empty demo file")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}: header is not valid JSON: {exc}") from exc
        if header.get("kind") != "demo" or header.get("schema") != SCHEMA_VERSION:
            raise ContractError(f"{path}: not a schema-{SCHEMA_VERSION} demo file")
        n, m = int(header["n_robot"]), int(header["m_object"])
        arity = 1 + 3 * n + 3 * m + 2
        rows = []
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            vals = raw.split()
            if len(vals) != arity:
                raise ContractError(f"{path} line {lineno}: expected {arity} values, got {len(vals)}")
            try:
                rows.append([float(v) for v in vals])
            except ValueError as exc:
                raise ContractError(f"{path} line {lineno}: {exc}") from exc
    if not rows:
        raise ContractError(f"{path}: demo file holds no steps")
    data = np.asarray(rows)
    ts = data[:, 0]
    rkp = data[:, 1 : 1 + 3 * n].reshape(-1, n, 3)
    okp = data[:, 1 + 3 * n : 1 + 3 * n + 3 * m].reshape(-1, m, 3)
    return Demonstration(
        robot_keypoints=rkp,
        object_keypoints=okp,
        gripper=data[:, -2],
        force=data[:, -1],
        timestamps=ts,
        task=str(header.get("task", "")),
        seed=int(header.get("seed", 0)),
        fps=float(header.get("fps", 30.0)),
    )
