"""Per-frame conversion of human-hand keypoints into robot state.

A hand frame holds 21 triangulated 3D keypoints (standard topology: wrist
plus four joints per finger). Each frame maps to an end-effector pose, the
pose expands into N robot keypoints through fixed offsets, the thumb-index
pinch distance gives the binary gripper state, and the glove force channel
is attached unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .fileio import atomic_write_text, fmt_row
from .geometry import DEGENERACY_RATIO, RigidTransform, decode_rotation6d, encode_rotation6d, kabsch

HAND_KEYPOINT_COUNT = 21
# Keypoint order: wrist, then 4 joints per finger from base to tip
# (thumb, index, middle, ring, pinky).
WRIST = 0
THUMB_TIP = 4
INDEX_TIP = 8
MIDDLE_TIP = 12
RING_TIP = 16
PINKY_TIP = 20

# Pinch distance below which the gripper is considered closed (meters).
# The boundary itself maps to open (strict less-than).
GRIP_CLOSE_DISTANCE = 0.07


@dataclass(frozen=True)
class HandFrame:
    """One timestep of triangulated hand keypoints (meters)."""

    keypoints: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=float)
        if kp.shape != (HAND_KEYPOINT_COUNT, 3):
            raise ContractError(
                f"hand frame needs {HAND_KEYPOINT_COUNT}x3 keypoints, got {kp.shape}"
            )
        if not np.all(np.isfinite(kp)):
            raise ContractError("hand keypoints contain non-finite values")
        kp.flags.writeable = False
        object.__setattr__(self, "keypoints", kp)

    def pinch_distance(self) -> float:
        return float(np.linalg.norm(self.keypoints[INDEX_TIP] - self.keypoints[THUMB_TIP]))


@dataclass(frozen=True)
class KeypointLayout:
    """N named rigid offsets expanding an end-effector pose into keypoints."""

    names: tuple
    offsets: tuple
    wrist_index: int

    def __post_init__(self):
        if len(self.names) != len(self.offsets):
            raise ContractError("layout names and offsets must align")
        if len(self.offsets) < 3:
            raise ContractError("layout needs at least 3 keypoints")
        if not 0 <= self.wrist_index < len(self.offsets):
            raise ContractError(f"wrist index {self.wrist_index} out of range")
        pts = self.translations()
        sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if sv[0] == 0.0 or sv[1] < DEGENERACY_RATIO * sv[0]:
            raise ContractError("layout offsets are collinear: pose would not be recoverable")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "offsets", tuple(self.offsets))

    def __len__(self) -> int:
        return len(self.offsets)

    def translations(self) -> np.ndarray:
        return np.stack([t.translation for t in self.offsets])


def default_layout() -> KeypointLayout:
    """Wrist at the end-effector origin plus three gripper-body points."""
    ident = np.eye(3)
    return KeypointLayout(
        names=("wrist", "jaw_left", "jaw_right", "knuckle"),
        offsets=(
            RigidTransform.identity(),
            RigidTransform(ident, np.array([0.04, 0.0, -0.05])),
            RigidTransform(ident, np.array([-0.04, 0.0, -0.05])),
            RigidTransform(ident, np.array([0.0, 0.05, -0.08])),
        ),
        wrist_index=0,
    )


@dataclass(frozen=True)
class RobotState:
    """Retargeted per-frame robot state."""

    pose: RigidTransform
    keypoints: np.ndarray
    gripper: bool
    force: float

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=float)
        if kp.ndim != 2 or kp.shape[1] != 3:
            raise ContractError(f"robot keypoints must be (n, 3), got {kp.shape}")
        if self.force < 0:
            raise ContractError(f"force must be non-negative, got {self.force}")
        kp.flags.writeable = False
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "force", float(self.force))


def hand_to_pose(frame: HandFrame, frame0: HandFrame, initial_pose: RigidTransform) -> RigidTransform:
    """End-effector pose for one hand frame.

    Position is the midpoint of the index and thumb tips; orientation is
    the rigid rotation from frame0 to the current frame composed onto the
    robot's reset orientation. Frame0 is assumed to match the robot reset
    pose, so an unchanged frame returns ``initial_pose`` itself.
    """
    if np.array_equal(frame.keypoints, frame0.keypoints):
        return initial_pose
    delta = kabsch(frame0.keypoints, frame.keypoints)
    position = 0.5 * (frame.keypoints[INDEX_TIP] + frame.keypoints[THUMB_TIP])
    return RigidTransform(delta.rotation @ initial_pose.rotation, position)


def pose_to_keypoints(pose: RigidTransform, layout: KeypointLayout) -> np.ndarray:
    """Expand a pose into the layout's keypoints (translation of pose ∘ offset)."""
    return layout.translations() @ pose.rotation.T + pose.translation


def keypoints_to_pose(points, layout: KeypointLayout, initial_orientation) -> RigidTransform:
    """Recover the end-effector pose from observed/predicted keypoints.

    Orientation: rigid rotation from the layout's reference points (posed
    at the known initial orientation) to the observed points, composed
    onto the initial orientation. Position: the wrist keypoint, corrected
    by the wrist offset (a no-op for layouts whose wrist offset is the
    identity, where the wrist keypoint *is* the position).
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape != (len(layout), 3):
        raise ContractError(f"expected {len(layout)}x3 keypoints, got {pts.shape}")
    r0 = np.asarray(initial_orientation, dtype=float)
    reference = layout.translations() @ r0.T
    delta = kabsch(reference, pts)
    rotation = delta.rotation @ r0
    wrist_offset = layout.offsets[layout.wrist_index].translation
    position = pts[layout.wrist_index] - rotation @ wrist_offset
    return RigidTransform(rotation, position)


def gripper_state(frame: HandFrame) -> bool:
    """True (closed) iff the thumb-index pinch distance is under 7 cm."""
    return frame.pinch_distance() < GRIP_CLOSE_DISTANCE


def retarget_trajectory(
    frames: Sequence[HandFrame],
    forces: Sequence[float],
    initial_pose: RigidTransform,
    layout: KeypointLayout,
) -> list[RobotState]:
    """Retarget a full hand trajectory with its per-frame force channel."""
    if len(frames) == 0:
        raise ContractError("trajectory must contain at least one frame")
    if len(forces) != len(frames):
        raise ContractError(f"{len(forces)} force values for {len(frames)} frames")
    frame0 = frames[0]
    states = []
    for frame, force in zip(frames, forces):
        pose = hand_to_pose(frame, frame0, initial_pose)
        states.append(
            RobotState(
                pose=pose,
                keypoints=pose_to_keypoints(pose, layout),
                gripper=gripper_state(frame),
                force=float(force),
            )
        )
    return states


def save_layout(layout: KeypointLayout, path) -> None:
    lines = [
        "# keypoint layout: name tx ty tz r6(6 values); rotation in 6D encoding",
        f"wrist_index {layout.wrist_index}",
    ]
    for name, off in zip(layout.names, layout.offsets):
        lines.append(f"{name} {fmt_row(off.translation)} {fmt_row(encode_rotation6d(off.rotation))}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_layout(path) -> KeypointLayout:
    names, offsets, wrist_index = [], [], None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "wrist_index":
                wrist_index = int(parts[1])
                continue
            if len(parts) != 10:
                raise ContractError(f"layout file line {lineno}: expected name + 9 numbers")
            try:
                values = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise ContractError(f"layout file line {lineno}: {exc}") from exc
            names.append(parts[0])
            offsets.append(RigidTransform(decode_rotation6d(np.array(values[3:])), np.array(values[:3])))
    if wrist_index is None:
        raise ContractError("layout file is missing the wrist_index line")
    return KeypointLayout(names=tuple(names), offsets=tuple(offsets), wrist_index=wrist_index)
