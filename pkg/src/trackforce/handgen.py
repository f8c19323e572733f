"""Synthetic hand-keypoint generation.

Stands in for the vision stack: produces 21-keypoint hand frames from a
scripted rigid motion plus a pinch parameter, and can render them to
two-view pixel tracks through a calibrated rig. Used by tests and by the
``retarget`` CLI examples; no learned models involved.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ContractError
from .fileio import atomic_write_text, fmt_float, fmt_row
from .geometry import CameraRig, RigidTransform, project
from .retarget import HAND_KEYPOINT_COUNT, INDEX_TIP, THUMB_TIP, HandFrame


def canonical_hand(pinch: float = 0.12) -> np.ndarray:
    """A schematic right hand in its local frame.

    The grip center (midpoint of index and thumb tips) sits exactly at the
    origin; the palm faces -z and fingers extend along +y. ``pinch`` is the
    tip separation in meters and moves only the thumb/index chains.
    """
    if pinch <= 0:
        raise ContractError(f"pinch distance must be positive, got {pinch}")
    half = 0.5 * pinch
    kp = np.zeros((HAND_KEYPOINT_COUNT, 3))
    kp[0] = (0.01, -0.10, -0.015)  # wrist
    # thumb: base near the wrist, tip at (-half, 0, 0)
    kp[1] = (-0.025, -0.085, -0.010)
    kp[2] = (-0.045, -0.060, -0.005)
    kp[3] = (-0.5 * (half + 0.045), -0.030, -0.002)
    kp[4] = (-half, 0.0, 0.0)
    # index: tip at (+half, 0, 0)
    kp[5] = (0.035, -0.040, -0.012)
    kp[6] = (0.040, -0.012, -0.006)
    kp[7] = (0.5 * (half + 0.040), -0.006, -0.003)
    kp[8] = (half, 0.0, 0.0)
    # middle, ring, pinky: static chains fanning along +y
    for f, (x0, ylen) in enumerate(((0.012, 0.075), (-0.010, 0.068), (-0.030, 0.055))):
        base = 9 + 4 * f
        for j in range(4):
            t = (j + 1) / 4.0
            kp[base + j] = (x0 - 0.004 * j, -0.045 + t * ylen, -0.014 + 0.004 * j)
    return kp


def make_hand_frame(pose: RigidTransform, pinch: float = 0.12, timestamp: float = 0.0) -> HandFrame:
    """Pose the canonical hand rigidly in the world."""
    return HandFrame(keypoints=pose.apply(canonical_hand(pinch)), timestamp=timestamp)


def scripted_hand_pick(
    initial_pose: RigidTransform,
    *,
    n_frames: int = 30,
    fps: float = 30.0,
    descend: float = 0.10,
    lift: float = 0.14,
    open_pinch: float = 0.12,
    closed_pinch: float = 0.05,
):
    """A synthetic pick: descend, pinch shut, lift.

    Returns (frames, segments) where segments maps phase names to index
    ranges; the lift phase has strictly increasing z. The first frame sits
    exactly at ``initial_pose`` with the open pinch.
    """
    if n_frames < 6:
        raise ContractError("pick script needs at least 6 frames")
    n_down = n_frames // 3
    n_close = max(2, n_frames // 6)
    n_up = n_frames - n_down - n_close
    frames = []
    t = 0
    for i in range(n_down):
        dz = -descend * i / max(1, n_down - 1)
        pose = RigidTransform(initial_pose.rotation, initial_pose.translation + (0, 0, dz))
        frames.append(make_hand_frame(pose, open_pinch, timestamp=t / fps))
        t += 1
    low = initial_pose.translation + (0.0, 0.0, -descend)
    for i in range(n_close):
        a = (i + 1) / n_close
        pinch = open_pinch + a * (closed_pinch - open_pinch)
        frames.append(make_hand_frame(RigidTransform(initial_pose.rotation, low), pinch, t / fps))
        t += 1
    for i in range(n_up):
        dz = lift * (i + 1) / n_up
        pose = RigidTransform(initial_pose.rotation, low + (0, 0, dz))
        frames.append(make_hand_frame(pose, closed_pinch, timestamp=t / fps))
        t += 1
    segments = {
        "descend": (0, n_down),
        "close": (n_down, n_down + n_close),
        "lift": (n_down + n_close, n_frames),
    }
    return frames, segments


def write_hand_tracks(path, frames, *, rig: CameraRig | None = None, fps: float = 30.0) -> None:
    """Serialize hand frames, either as raw 3D points or as two-view pixels.

    With a rig, each line holds the 21 keypoints projected through both
    cameras (21x2 pixels per view); without, the 21x3 world points.
    """
    mode = "pixels" if rig is not None else "points3d"
    header = {"schema": 1, "kind": "hand_tracks", "mode": mode, "fps": fps, "n_keypoints": HAND_KEYPOINT_COUNT}
    lines = [json.dumps(header, sort_keys=True)]
    for frame in frames:
        cols = [fmt_float(frame.timestamp)]
        if rig is None:
            cols.append(fmt_row(frame.keypoints))
        else:
            cols.append(fmt_row(np.stack([project(rig.cam_a, p) for p in frame.keypoints])))
            cols.append(fmt_row(np.stack([project(rig.cam_b, p) for p in frame.keypoints])))
        lines.append(" ".join(cols))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_hand_tracks(path):
    """Read a hand-track file. Returns (header, timestamps, data).

    data is (T, 21, 3) world points in points3d mode, or a pair of
    (T, 21, 2) pixel arrays in pixels mode.
    """
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise ContractError("hand-track file is empty")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ContractError(f"hand-track header is not valid JSON: {exc}") from exc
        if header.get("kind") != "hand_tracks":
            raise ContractError("not a hand-track file")
        mode = header.get("mode")
        per_line = 1 + (HAND_KEYPOINT_COUNT * 4 if mode == "pixels" else HAND_KEYPOINT_COUNT * 3)
        ts, rows = [], []
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            vals = raw.split()
            if len(vals) != per_line:
                raise ContractError(f"hand-track line {lineno}: expected {per_line} values, got {len(vals)}")
            vals = [float(v) for v in vals]
            ts.append(vals[0])
            rows.append(vals[1:])
    if not rows:
        raise ContractError("hand-track file holds no frames")
    data = np.asarray(rows)
    ts = np.asarray(ts)
    if mode == "pixels":
        n = HAND_KEYPOINT_COUNT
        return header, ts, (data[:, : 2 * n].reshape(-1, n, 2), data[:, 2 * n :].reshape(-1, n, 2))
    return header, ts, data.reshape(-1, HAND_KEYPOINT_COUNT, 3)
