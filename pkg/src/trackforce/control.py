"""Closed-loop execution: force-feedback gripper control and rollouts.

The gripper controller repeatedly nudges the closure setpoint
proportionally to the force error (optional derivative term, default off)
until the measured force is within epsilon of the target, with an
iteration cap and saturation handling on top. The rollout loop closes the
policy-plant loop: observe, predict a chunk, temporally aggregate, parse
the action, drive the gripper (controller when commanded closed), then
execute the end-effector pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .demofile import Demonstration
from .errors import ContractError, DegeneracyError
from .geometry import RigidTransform
from .plant import CRUSHED, Plant, TaskSpec, sample_object, task_success
from .policy import (
    ActionChunk,
    ChunkBuffer,
    ParsedAction,
    parse_action,
    window_from_history,
)
from .retarget import KeypointLayout, default_layout
from .rngutil import STREAM_EVAL, STREAM_PLANT, substream

CONVERGED = "converged"
ITER_CAP = "iter_cap"
CLOSURE_SATURATED = "closure_saturated"


@dataclass(frozen=True)
class ControllerConfig:
    """Force-feedback gripper controller constants (sensor-norm units)."""

    k: float = 0.001              # closure per unit force error
    epsilon: float = 5.0          # convergence band
    derivative_gain: float = 0.0  # optional damping; published behavior is P-only
    max_inner_iters: int = 50
    closure_min: float = 0.0
    closure_max: float = 1.0

    def __post_init__(self):
        if self.k <= 0 or self.epsilon <= 0:
            raise ContractError("k and epsilon must be positive")
        if self.max_inner_iters < 1:
            raise ContractError("max_inner_iters must be >= 1")
        if not 0.0 <= self.closure_min < self.closure_max <= 1.0:
            raise ContractError("closure bounds must satisfy 0 <= min < max <= 1")


@dataclass(frozen=True)
class TraceStep:
    """One inner iteration: error input, closure update, resulting force."""

    force_target: float
    force_before: float
    delta_closure: float
    closure: float
    force_after: float


@dataclass(frozen=True)
class ControllerTrace:
    steps: tuple
    termination: str

    @property
    def converged(self) -> bool:
        return self.termination == CONVERGED

    def __len__(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {
            "termination": self.termination,
            "iterations": len(self.steps),
            "final_force": self.steps[-1].force_after if self.steps else None,
            "force_target": self.steps[-1].force_target if self.steps else None,
        }


def force_feedback_gripper_control(
    plant: Plant, force_target: float, config: ControllerConfig = ControllerConfig()
) -> tuple:
    """Drive the measured grip force to ``force_target``.

    Runs at least one inner iteration (repeat-until). Stops when the force
    error falls within epsilon, the iteration cap is hit, or the closure is
    pinned at a bound with no progress possible. Non-convergence is not an
    error: the caller receives the trace and decides.
    """
    if not math.isfinite(force_target) or force_target < 0:
        raise ContractError(f"force target must be finite and >= 0, got {force_target}")
    measured = plant.read_force()
    steps = []
    prev_error = None
    termination = ITER_CAP
    for _ in range(config.max_inner_iters):
        error = force_target - measured
        delta = config.k * error
        if prev_error is not None:
            delta += config.derivative_gain * (error - prev_error)
        requested = plant.closure + delta
        command = min(config.closure_max, max(config.closure_min, requested))
        pinned = command != requested and plant.closure == command
        before = measured
        plant.step(command)
        measured = plant.read_force()
        steps.append(
            TraceStep(
                force_target=force_target,
                force_before=before,
                delta_closure=delta,
                closure=plant.closure,
                force_after=measured,
            )
        )
        prev_error = error
        if abs(force_target - measured) <= config.epsilon:
            termination = CONVERGED
            break
        if pinned and plant.closure == command:
            termination = CLOSURE_SATURATED
            break
    return plant.state(), ControllerTrace(steps=tuple(steps), termination=termination)


@dataclass(frozen=True)
class RolloutConfig:
    """Inference-loop constants."""

    close_threshold: float = 0.6
    open_threshold: float = 0.4
    control_rate_hz: float = 6.0
    max_steps: int = 240
    temporal_decay: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.open_threshold < self.close_threshold:
            raise ContractError("need open_threshold < close_threshold (hysteresis band)")
        if self.max_steps < 1 or self.control_rate_hz <= 0:
            raise ContractError("bad rollout constants")


@dataclass
class EpisodeRecord:
    """Outcome plus per-step states and controller traces of one episode."""

    success: bool
    reason: str
    task: str
    seed: int
    n_steps: int
    peak_force: float
    crushed: bool
    dropped: bool
    config: dict
    steps: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kind": "episode",
            "success": self.success,
            "reason": self.reason,
            "task": self.task,
            "seed": self.seed,
            "n_steps": self.n_steps,
            "peak_force": self.peak_force,
            "crushed": self.crushed,
            "dropped": self.dropped,
            "config": self.config,
            "steps": self.steps,
        }


def _config_echo(controller: ControllerConfig, config: RolloutConfig, binary_gripper: bool) -> dict:
    return {
        "k": controller.k,
        "epsilon": controller.epsilon,
        "derivative_gain": controller.derivative_gain,
        "max_inner_iters": controller.max_inner_iters,
        "close_threshold": config.close_threshold,
        "open_threshold": config.open_threshold,
        "control_rate_hz": config.control_rate_hz,
        "max_steps": config.max_steps,
        "temporal_decay": config.temporal_decay,
        "binary_gripper": binary_gripper,
    }


def run_episode(
    act,
    plant: Plant,
    layout: KeypointLayout,
    task: TaskSpec,
    *,
    controller: ControllerConfig = ControllerConfig(),
    config: RolloutConfig = RolloutConfig(),
    binary_gripper: bool = False,
    seed: int = 0,
) -> EpisodeRecord:
    """Drive the plant with ``act(history, step) -> ActionChunk``.

    This is the rollout machinery shared by the learned policy, demo
    replay, and test policies: chunk buffering with temporal averaging,
    action parsing, gripper hysteresis, the force controller, and the
    task success predicate.
    """
    r0 = plant.eef_pose.rotation
    buffer = ChunkBuffer(config.temporal_decay)
    history = []
    record = EpisodeRecord(
        success=False,
        reason="max_steps",
        task=task.name,
        seed=seed,
        n_steps=0,
        peak_force=0.0,
        crushed=False,
        dropped=False,
        config=_config_echo(controller, config, binary_gripper),
    )
    failure = None
    for step in range(config.max_steps):
        history.append(plant.observe())
        chunk = act(history, step)
        buffer.push(step, chunk)
        action = buffer.action_for(step)
        try:
            parsed = parse_action(action, layout, r0)
        except DegeneracyError as exc:
            failure = f"degenerate predicted keypoints: {exc}"
            break

        trace = None
        if parsed.gripper_logit > config.close_threshold:
            if binary_gripper:
                plant.step(1.0)
            else:
                _, trace = force_feedback_gripper_control(plant, parsed.force, controller)
        elif parsed.gripper_logit < config.open_threshold:
            plant.step(0.0)
        # logits inside the hysteresis band leave the gripper untouched

        state = plant.step(plant.closure, eef_target=parsed.eef_pose)
        record.steps.append(
            {
                "step": step,
                "time": step / config.control_rate_hz,
                "gripper_logit": parsed.gripper_logit,
                "force_target": parsed.force,
                "force_clamped": parsed.force_clamped,
                "closure": state.closure,
                "measured_force": state.measured_force,
                "status": state.status,
                "eef_position": [float(v) for v in state.eef_pose.translation],
                "eef_orientation6d": [float(v) for v in parsed.orientation6d],
                "controller": trace.to_dict() if trace is not None else None,
            }
        )
        record.n_steps = step + 1
        if plant.status == CRUSHED:
            break

    record.peak_force = plant.peak_force
    record.crushed = plant.ever_crushed
    record.dropped = plant.ever_dropped
    if failure is not None:
        record.success, record.reason = False, failure
    else:
        record.success, record.reason = task_success(task, plant)
    return record


def policy_actor(net):
    """Wrap a trained policy as an actuator for ``run_episode``."""

    def act(history, step):
        return net.predict(window_from_history(history, net.config.history))

    return act


def demo_actor(demo: Demonstration, horizon: int):
    """Replay a demonstration's future states as 'predicted' chunks."""

    def act(history, step):
        idx = np.minimum(np.arange(step + 1, step + horizon + 1), demo.length - 1)
        return ActionChunk(
            tracks=demo.robot_keypoints[idx],
            gripper=demo.gripper[idx],
            force=demo.force[idx],
        )

    return act


def rollout(
    net,
    plant: Plant,
    layout: KeypointLayout,
    task: TaskSpec,
    *,
    controller: ControllerConfig = ControllerConfig(),
    config: RolloutConfig = RolloutConfig(),
    binary_gripper: bool = False,
    seed: int = 0,
) -> EpisodeRecord:
    """Closed-loop episode with a trained policy."""
    return run_episode(
        policy_actor(net),
        plant,
        layout,
        task,
        controller=controller,
        config=config,
        binary_gripper=binary_gripper,
        seed=seed,
    )


def replay_demonstration(
    demo: Demonstration,
    task: TaskSpec,
    layout: KeypointLayout | None = None,
    *,
    controller: ControllerConfig = ControllerConfig(),
    config: RolloutConfig | None = None,
    sensor_noise_sigma: float = 0.0,
) -> EpisodeRecord:
    """Re-execute a demo open loop through the rollout machinery.

    The plant is reconstructed from the demo's task and seed metadata, so
    a replayed expert demonstration must succeed on a noiseless plant.
    """
    layout = layout if layout is not None else default_layout()
    obj = sample_object(task, substream(demo.seed, STREAM_PLANT))
    plant = Plant(
        obj,
        layout,
        sensor_noise_sigma=sensor_noise_sigma,
        rng=substream(demo.seed, STREAM_EVAL),
    )
    if config is None:
        config = RolloutConfig(max_steps=demo.length + 10)
    return run_episode(
        demo_actor(demo, horizon=10),
        plant,
        layout,
        task,
        controller=controller,
        config=config,
        seed=demo.seed,
    )


@dataclass
class EvalReport:
    """Aggregate over independent rollouts with distinct seeds."""

    task: str
    seeds: list
    success_count: int
    crush_count: int
    drop_count: int
    mean_peak_force: float
    episodes: list

    @property
    def success_rate(self) -> float:
        return self.success_count / len(self.seeds) if self.seeds else 0.0

    def to_dict(self) -> dict:
        return {
            "kind": "eval_report",
            "task": self.task,
            "seeds": list(self.seeds),
            "n_episodes": len(self.seeds),
            "success_count": self.success_count,
            "success_rate": self.success_rate,
            "crush_count": self.crush_count,
            "drop_count": self.drop_count,
            "mean_peak_force": self.mean_peak_force,
            "episodes": [e.to_dict() for e in self.episodes],
        }


def evaluate(
    net,
    task: TaskSpec,
    n_episodes: int,
    seeds=None,
    *,
    layout: KeypointLayout | None = None,
    controller: ControllerConfig = ControllerConfig(),
    config: RolloutConfig = RolloutConfig(),
    binary_gripper: bool = False,
    sensor_noise_sigma: float = 1.0,
    actor=None,
) -> EvalReport:
    """Run independent episodes and aggregate outcomes.

    Each seed fully determines its episode (object placement, sensor
    noise), so a fixed seed list reproduces the report bytewise.
    """
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    layout = layout if layout is not None else default_layout()
    if seeds is None:
        seeds = [config.seed + i for i in range(n_episodes)]
    seeds = list(seeds)[:n_episodes]
    if len(seeds) < n_episodes:
        raise ContractError(f"need {n_episodes} seeds, got {len(seeds)}")

    episodes = []
    for seed in seeds:
        obj = sample_object(task, substream(seed, STREAM_PLANT))
        plant = Plant(
            obj,
            layout,
            sensor_noise_sigma=sensor_noise_sigma,
            rng=substream(seed, STREAM_EVAL),
        )
        act = actor(plant) if actor is not None else policy_actor(net)
        episodes.append(
            run_episode(
                act,
                plant,
                layout,
                task,
                controller=controller,
                config=config,
                binary_gripper=binary_gripper,
                seed=seed,
            )
        )
    return EvalReport(
        task=task.name,
        seeds=seeds,
        success_count=sum(e.success for e in episodes),
        crush_count=sum(e.crushed for e in episodes),
        drop_count=sum(e.dropped for e in episodes),
        mean_peak_force=float(np.mean([e.peak_force for e in episodes])),
        episodes=episodes,
    )
