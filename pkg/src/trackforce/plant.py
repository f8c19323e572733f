"""Simulated gripper-object contact world.

Stands in for the physical arm, tactile gripper, and point tracker: a
quasi-static plant where contact force is a linear hinge in gripper
closure, objects are held once grip force clears the slip threshold,
crushed past the crush threshold (absorbing), and dropped when moved with
too little grip. Also hosts the scripted expert that replaces human glove
demonstrations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .demofile import Demonstration
from .errors import ContractError
from .fileio import atomic_write_text, fmt_float
from .geometry import RigidTransform
from .retarget import KeypointLayout, default_layout, pose_to_keypoints
from .rngutil import STREAM_PLANT, substream

FREE = "free"
TOUCHED = "touched"
HELD = "held"
CRUSHED = "crushed"
DROPPED = "dropped"

# Closure above this reads as a closed gripper bit in observations.
GRIPPER_OBSERVED_CLOSED = 0.02

# Robot reset pose shared by demos and rollouts (assumption: the first
# demo frame matches it).
RESET_POSE = RigidTransform(np.eye(3), np.array([0.45, 0.0, 0.30]))


@dataclass(frozen=True)
class ObjectModel:
    """Contact parameters and geometry of the single manipulated object."""

    contact_closure: float      # closure at first contact (g0)
    stiffness: float            # sensor-norm units per unit closure
    crush_force: float          # sensor-norm units
    slip_force: float           # minimum hold force while moving
    deformable: bool
    keypoints: np.ndarray       # (M, 3) body-frame tracker points
    initial_pose: RigidTransform

    def __post_init__(self):
        if not 0.0 < self.contact_closure < 1.0:
            raise ContractError(f"contact closure must be in (0, 1), got {self.contact_closure}")
        if self.stiffness <= 0:
            raise ContractError(f"stiffness must be positive, got {self.stiffness}")
        if not 0.0 < self.slip_force < self.crush_force:
            raise ContractError(
                f"need 0 < slip_force < crush_force, got slip={self.slip_force} crush={self.crush_force}"
            )
        kp = np.array(self.keypoints, dtype=float)
        if kp.ndim != 2 or kp.shape[1] != 3:
            raise ContractError(f"object keypoints must be (M, 3), got {kp.shape}")
        kp.flags.writeable = False
        object.__setattr__(self, "keypoints", kp)


@dataclass(frozen=True)
class PlantState:
    """Immutable snapshot of the plant after a step."""

    closure: float
    eef_pose: RigidTransform
    object_pose: RigidTransform
    measured_force: float
    status: str
    sensor_noise_sigma: float
    command_clamped: bool = False


@dataclass(frozen=True)
class SimObservation:
    """What the policy sees: scene keypoints, gripper bit, force reading."""

    robot_keypoints: np.ndarray
    object_keypoints: np.ndarray
    gripper: int
    force: float


class Plant:
    """Single-owner mutable contact world; one instance per episode."""

    def __init__(
        self,
        obj: ObjectModel | None,
        layout: KeypointLayout | None = None,
        *,
        eef_pose: RigidTransform = RESET_POSE,
        sensor_noise_sigma: float = 1.0,
        tracker_noise_sigma: float = 0.0,
        max_closure_rate: float = 0.2,
        grasp_radius: float = 0.05,
        rng: np.random.Generator | None = None,
    ):
        if max_closure_rate <= 0:
            raise ContractError("max_closure_rate must be positive")
        self.object = obj
        self.layout = layout if layout is not None else default_layout()
        self.eef_pose = eef_pose
        self.object_pose = obj.initial_pose if obj is not None else RigidTransform.identity()
        self.closure = 0.0
        self.status = FREE
        self.sensor_noise_sigma = float(sensor_noise_sigma)
        self.tracker_noise_sigma = float(tracker_noise_sigma)
        self.max_closure_rate = float(max_closure_rate)
        self.grasp_radius = float(grasp_radius)
        self.ever_crushed = False
        self.ever_dropped = False
        self.peak_force = 0.0
        self._rest_z = self.object_pose.translation[2]
        self._grasp_offset = None  # eef^-1 ∘ object while held
        self._clamped = False
        self._rng = rng if rng is not None else np.random.default_rng(0)

    # -- forces ----------------------------------------------------------

    def _in_reach(self) -> bool:
        if self.object is None:
            return False
        if self.status == HELD:
            return True
        gap = np.linalg.norm(self.eef_pose.translation - self.object_pose.translation)
        return bool(gap <= self.grasp_radius)

    def contact_force(self) -> float:
        """Noiseless hinge force at the current closure."""
        if not self._in_reach():
            return 0.0
        obj = self.object
        return max(0.0, obj.stiffness * (self.closure - obj.contact_closure))

    def read_force(self) -> float:
        """Sensor reading: true force plus fresh Gaussian noise, floored at 0."""
        f = self.contact_force()
        if self.sensor_noise_sigma > 0:
            f += self.sensor_noise_sigma * self._rng.standard_normal()
        return max(0.0, f)

    # -- stepping --------------------------------------------------------

    def step(self, closure_command: float, eef_target: RigidTransform | None = None) -> PlantState:
        """Advance one step: rate-limited closure update, contact and
        grasp bookkeeping, then end-effector motion (held objects follow)."""
        cmd = float(closure_command)
        clamped = not (0.0 <= cmd <= 1.0) or not math.isfinite(cmd)
        cmd = min(1.0, max(0.0, cmd)) if math.isfinite(cmd) else self.closure
        self._clamped = clamped

        delta = cmd - self.closure
        delta = max(-self.max_closure_rate, min(self.max_closure_rate, delta))
        self.closure = min(1.0, max(0.0, self.closure + delta))

        moved = False
        if eef_target is not None:
            moved = (
                np.linalg.norm(eef_target.translation - self.eef_pose.translation) > 1e-12
                or np.abs(eef_target.rotation - self.eef_pose.rotation).max() > 1e-12
            )

        was_held = self.status == HELD
        force = self.contact_force()
        self.peak_force = max(self.peak_force, force)

        if self.object is not None and self.status != CRUSHED:
            if force >= self.object.crush_force:
                self.status = CRUSHED
                self.ever_crushed = True
                self._grasp_offset = None
            elif was_held:
                if force >= self.object.slip_force:
                    pass  # still held
                elif moved:
                    self.status = DROPPED
                    self.ever_dropped = True
                    self._release()
                else:
                    self.status = TOUCHED if force > 0 else FREE
                    self._release()
            else:
                if force >= self.object.slip_force and self._in_reach():
                    self.status = HELD
                    self._grasp_offset = self.eef_pose.invert().compose(self.object_pose)
                elif force > 0:
                    self.status = TOUCHED
                elif self.status == TOUCHED:
                    self.status = FREE

        if eef_target is not None:
            self.eef_pose = eef_target
        if self.status == HELD:
            self.object_pose = self.eef_pose.compose(self._grasp_offset)

        return self.state()

    def _release(self):
        """Detach the object and let it settle onto the table."""
        self._grasp_offset = None
        t = self.object_pose.translation.copy()
        t[2] = self._rest_z
        self.object_pose = RigidTransform(self.object_pose.rotation, t)

    def state(self) -> PlantState:
        return PlantState(
            closure=self.closure,
            eef_pose=self.eef_pose,
            object_pose=self.object_pose,
            measured_force=self.read_force(),
            status=self.status,
            sensor_noise_sigma=self.sensor_noise_sigma,
            command_clamped=self._clamped,
        )

    def observe(self) -> SimObservation:
        """Scene observation: exact robot keypoints from the end-effector
        pose, object keypoints from the (simulated) tracker, plus the
        gripper bit and a force reading."""
        robot_kp = pose_to_keypoints(self.eef_pose, self.layout)
        if self.object is not None:
            object_kp = self.object_pose.apply(self.object.keypoints)
            if self.tracker_noise_sigma > 0:
                object_kp = object_kp + self.tracker_noise_sigma * self._rng.standard_normal(object_kp.shape)
        else:
            object_kp = np.zeros((0, 3))
        return SimObservation(
            robot_keypoints=robot_kp,
            object_keypoints=object_kp,
            gripper=int(self.closure > GRIPPER_OBSERVED_CLOSED),
            force=self.read_force(),
        )


# -- tasks ---------------------------------------------------------------

TASK_NAMES = ("fragile_pick_place", "unstack", "twist_lift")


@dataclass(frozen=True)
class TaskSpec:
    """Scenario parameters: object family, spawn region, goal predicate."""

    name: str
    stiffness: float = 1000.0
    crush_force: float = 150.0
    slip_force: float = 50.0
    contact_closure_low: float = 0.15
    contact_closure_high: float = 0.35
    deformable: bool = True
    object_size: float = 0.03
    spawn_center: tuple = (0.45, -0.12, 0.03)
    spawn_radius: float = 0.05
    goal_position: tuple = (0.45, 0.15, 0.03)
    goal_radius: float = 0.04
    force_target_frac: float = 0.4
    lift_height: float = 0.12
    twist_angle: float = 0.0   # radians of cap rotation; 0 disables twisting
    fps: float = 30.0

    def target_force(self) -> float:
        return self.slip_force + self.force_target_frac * (self.crush_force - self.slip_force)


def builtin_task(name: str) -> TaskSpec:
    if name == "fragile_pick_place":
        return TaskSpec(name=name)
    if name == "unstack":
        # Over-squeezing "lifts the stack": modeled by a lower crush bound.
        return TaskSpec(
            name=name,
            crush_force=110.0,
            slip_force=45.0,
            deformable=False,
            spawn_center=(0.50, -0.10, 0.05),
            goal_position=(0.40, 0.14, 0.05),
        )
    if name == "twist_lift":
        return TaskSpec(
            name=name,
            crush_force=200.0,
            slip_force=60.0,
            deformable=False,
            object_size=0.02,
            spawn_center=(0.48, -0.05, 0.04),
            twist_angle=math.radians(75.0),
        )
    raise ContractError(f"unknown task {name!r} (builtins: {', '.join(TASK_NAMES)})")


def object_body_keypoints(size: float) -> np.ndarray:
    s = float(size)
    return np.array(
        [
            [s, 0.0, s],
            [-s, 0.0, s],
            [0.0, s, s],
            [0.0, -0.5 * s, 1.5 * s],
        ]
    )


def sample_object(task: TaskSpec, rng: np.random.Generator) -> ObjectModel:
    """Randomized object instance: placement and first-contact closure."""
    g0 = rng.uniform(task.contact_closure_low, task.contact_closure_high)
    dx, dy = rng.uniform(-task.spawn_radius, task.spawn_radius, size=2)
    center = np.asarray(task.spawn_center, dtype=float) + np.array([dx, dy, 0.0])
    return ObjectModel(
        contact_closure=float(g0),
        stiffness=task.stiffness,
        crush_force=task.crush_force,
        slip_force=task.slip_force,
        deformable=task.deformable,
        keypoints=object_body_keypoints(task.object_size),
        initial_pose=RigidTransform(np.eye(3), center),
    )


def rotation_angle(r: np.ndarray) -> float:
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(min(1.0, max(-1.0, c))))


def task_success(task: TaskSpec, plant: Plant) -> tuple[bool, str]:
    """Task predicate: goal reached, never crushed, never dropped."""
    if plant.ever_crushed:
        return False, "crushed"
    if plant.ever_dropped:
        return False, "dropped"
    if plant.object is None:
        return False, "no object"
    obj_t = plant.object_pose.translation
    if task.twist_angle > 0:
        turned = rotation_angle(plant.object_pose.rotation @ plant.object.initial_pose.rotation.T)
        lifted = obj_t[2] >= plant.object.initial_pose.translation[2] + 0.5 * task.lift_height
        if turned < 0.8 * task.twist_angle:
            return False, "not twisted"
        if not lifted:
            return False, "not lifted"
        return True, "ok"
    goal = np.asarray(task.goal_position, dtype=float)
    if np.linalg.norm(obj_t[:2] - goal[:2]) > task.goal_radius:
        return False, "object not at goal"
    if abs(obj_t[2] - goal[2]) > 0.02:
        return False, "object not resting at goal height"
    return True, "ok"


# -- scripted expert -----------------------------------------------------

EEF_STEP = 0.02        # meters per demo frame
TWIST_STEP = 0.12      # radians per demo frame
APPROACH_HEIGHT = 0.10


def _rz(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _walk_to(pose: RigidTransform, target: np.ndarray) -> RigidTransform:
    d = target - pose.translation
    dist = np.linalg.norm(d)
    if dist <= EEF_STEP:
        return RigidTransform(pose.rotation, target)
    return RigidTransform(pose.rotation, pose.translation + d * (EEF_STEP / dist))


def scripted_expert(
    task: TaskSpec,
    obj: ObjectModel | None = None,
    seed: int = 0,
    layout: KeypointLayout | None = None,
) -> Demonstration:
    """Generate one noiseless expert demonstration at the task's fps.

    Approach, close to the target grip force, (optionally twist), move,
    release, retreat; per-step force targets stay strictly between the
    slip and crush thresholds. Deterministic per seed.
    """
    rng = substream(seed, STREAM_PLANT)
    if obj is None:
        obj = sample_object(task, rng)
    layout = layout if layout is not None else default_layout()
    plant = Plant(obj, layout, eef_pose=RESET_POSE, sensor_noise_sigma=0.0, tracker_noise_sigma=0.0)

    f_target = task.target_force()
    grasp_closure = obj.contact_closure + f_target / obj.stiffness
    grasp_point = obj.initial_pose.translation.copy()
    above_grasp = grasp_point + np.array([0.0, 0.0, APPROACH_HEIGHT])
    lift_point = grasp_point + np.array([0.0, 0.0, task.lift_height])

    steps = []

    def record(grip_bit: int):
        obs = plant.observe()
        steps.append((obs.robot_keypoints, obs.object_keypoints, grip_bit, plant.contact_force()))

    def move_phase(target, grip_bit, closure_cmd, max_frames=400):
        for _ in range(max_frames):
            if np.linalg.norm(plant.eef_pose.translation - target) < 1e-9:
                return
            plant.step(closure_cmd, _walk_to(plant.eef_pose, np.asarray(target, dtype=float)))
            record(grip_bit)

    record(0)                                   # reset frame
    move_phase(above_grasp, 0, 0.0)             # hover over the object
    move_phase(grasp_point, 0, 0.0)             # descend
    for _ in range(60):                         # close until the grip force is reached
        plant.step(grasp_closure)
        record(1)
        if abs(plant.contact_force() - f_target) < 1e-9:
            break
    for _ in range(2):                          # settle
        plant.step(grasp_closure)
        record(1)

    if task.twist_angle > 0:
        turned = 0.0
        while turned < task.twist_angle - 1e-9:
            dtheta = min(TWIST_STEP, task.twist_angle - turned)
            plant.step(grasp_closure, RigidTransform(_rz(dtheta) @ plant.eef_pose.rotation, plant.eef_pose.translation))
            record(1)
            turned += dtheta
        move_phase(lift_point, 1, grasp_closure)
        for _ in range(3):
            plant.step(grasp_closure)
            record(1)
    else:
        goal = np.asarray(task.goal_position, dtype=float)
        above_goal = goal + np.array([0.0, 0.0, task.lift_height])
        move_phase(lift_point, 1, grasp_closure)
        move_phase(above_goal, 1, grasp_closure)
        move_phase(goal, 1, grasp_closure)
        for _ in range(60):                     # open until contact is lost
            plant.step(0.0)
            record(0)
            if plant.closure <= 0.0:
                break
        move_phase(goal + np.array([0.0, 0.0, APPROACH_HEIGHT]), 0, 0.0)

    if plant.ever_crushed or plant.ever_dropped:
        raise ContractError(f"scripted expert failed on task {task.name!r} (seed {seed})")

    robot_kp = np.stack([s[0] for s in steps])
    object_kp = np.stack([s[1] for s in steps])
    return Demonstration(
        robot_keypoints=robot_kp,
        object_keypoints=object_kp,
        gripper=np.array([s[2] for s in steps], dtype=float),
        force=np.array([s[3] for s in steps], dtype=float),
        timestamps=np.arange(len(steps)) / task.fps,
        task=task.name,
        seed=seed,
        fps=task.fps,
    )


# -- task spec files -----------------------------------------------------

_TASK_FIELDS = {
    "name": str,
    "stiffness": float,
    "crush_force": float,
    "slip_force": float,
    "contact_closure_low": float,
    "contact_closure_high": float,
    "deformable": bool,
    "object_size": float,
    "spawn_center": tuple,
    "spawn_radius": float,
    "goal_position": tuple,
    "goal_radius": float,
    "force_target_frac": float,
    "lift_height": float,
    "twist_angle": float,
    "fps": float,
}


def save_task_spec(task: TaskSpec, path) -> None:
    lines = ["# task spec (flat key = value)"]
    for key, kind in _TASK_FIELDS.items():
        value = getattr(task, key)
        if kind is tuple:
            value = ", ".join(fmt_float(v) for v in value)
        elif kind is float:
            value = fmt_float(value)
        elif kind is bool:
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_task_spec(path) -> TaskSpec:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ContractError(f"task spec line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _TASK_FIELDS:
                raise ContractError(f"task spec line {lineno}: unknown key {key!r}")
            kind = _TASK_FIELDS[key]
            try:
                if kind is str:
                    values[key] = value
                elif kind is bool:
                    values[key] = value.lower() in ("1", "true", "yes")
                elif kind is tuple:
                    values[key] = tuple(float(v) for v in value.split(","))
                else:
                    values[key] = float(value)
            except ValueError as exc:
                raise ContractError(f"task spec line {lineno}: {exc}") from exc
    if "name" not in values:
        raise ContractError("task spec must define a name")
    return TaskSpec(**values)
