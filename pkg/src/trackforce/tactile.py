"""Glove/gripper force channel: norm aggregation, resampling, calibration.

The raw stream delivers 5 magnetometer vectors per sample at ~200 Hz; the
scalar force channel is the Euclidean norm of the baseline-subtracted
center magnetometer. A weighing-scale session maps that sensor norm onto
Newtons through a monotone piecewise-linear curve fitted with
pool-adjacent-violators. Controller-facing forces stay in sensor-norm
units; the Newton map is for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DegeneracyError
from .fileio import atomic_write_text, fmt_float

MAGNETOMETER_COUNT = 5
CENTER_MAGNETOMETER = 2


@dataclass(frozen=True)
class RawForceSample:
    """One glove sample: 5 magnetometer vectors plus the rest baseline."""

    timestamp: float
    magnetometers: np.ndarray
    baseline: np.ndarray

    def __post_init__(self):
        mags = np.array(self.magnetometers, dtype=float)
        base = np.array(self.baseline, dtype=float)
        for name, arr in (("magnetometers", mags), ("baseline", base)):
            if arr.shape != (MAGNETOMETER_COUNT, 3):
                raise ContractError(f"{name} must be {MAGNETOMETER_COUNT}x3, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"{name} contains non-finite values")
            arr.flags.writeable = False
        object.__setattr__(self, "magnetometers", mags)
        object.__setattr__(self, "baseline", base)


def aggregate_norm(sample: RawForceSample) -> float:
    """Norm of the baseline-subtracted center magnetometer reading."""
    residual = sample.magnetometers[CENTER_MAGNETOMETER] - sample.baseline[CENTER_MAGNETOMETER]
    return float(np.linalg.norm(residual))


def resample_to_frames(stream: Sequence[RawForceSample], frame_times) -> tuple[np.ndarray, np.ndarray]:
    """Average the per-sample norms into per-frame values.

    Frame i owns the half-open window [t_i, t_{i+1}); the last frame uses a
    trailing window of the nominal frame width. Returns (values, gap_flags):
    an empty window holds the previous frame's value (0 before the first)
    and sets its gap flag.
    """
    frame_times = np.asarray(frame_times, dtype=float)
    if frame_times.ndim != 1 or frame_times.size == 0:
        raise ContractError("frame_times must be a non-empty 1D array")
    if frame_times.size > 1 and np.any(np.diff(frame_times) <= 0):
        raise ContractError("frame_times must be strictly increasing")
    if len(stream) == 0:
        raise ContractError("force stream is empty")

    ts = np.array([s.timestamp for s in stream], dtype=float)
    if np.any(np.diff(ts) <= 0):
        raise ContractError("stream timestamps must be strictly increasing")
    if ts[0] > frame_times[0] or ts[-1] < frame_times[-1]:
        raise ContractError(
            f"stream [{ts[0]:.6g}, {ts[-1]:.6g}] does not cover frames "
            f"[{frame_times[0]:.6g}, {frame_times[-1]:.6g}]"
        )

    norms = np.array([aggregate_norm(s) for s in stream])
    if frame_times.size > 1:
        nominal = float(np.mean(np.diff(frame_times)))
        edges = np.append(frame_times, frame_times[-1] + nominal)
    else:
        # Single frame: consume the whole remaining stream.
        edges = np.array([frame_times[0], ts[-1] + 1.0])

    values = np.zeros(frame_times.size)
    gaps = np.zeros(frame_times.size, dtype=bool)
    starts = np.searchsorted(ts, edges[:-1], side="left")
    stops = np.searchsorted(ts, edges[1:], side="left")
    previous = 0.0
    for i, (a, b) in enumerate(zip(starts, stops)):
        if b > a:
            previous = float(np.mean(norms[a:b]))
        else:
            gaps[i] = True
        values[i] = previous
    return values, gaps


@dataclass(frozen=True)
class CalibrationCurve:
    """Monotone piecewise-linear sensor-norm -> Newton map, anchored at (0, 0)."""

    norms: np.ndarray
    newtons: np.ndarray

    def __post_init__(self):
        n = np.array(self.norms, dtype=float)
        f = np.array(self.newtons, dtype=float)
        if n.ndim != 1 or n.shape != f.shape or n.size < 2:
            raise ContractError("curve needs matching 1D knot arrays with >= 2 knots")
        if np.any(np.diff(n) <= 0):
            raise ContractError("knot norms must be strictly increasing")
        if np.any(np.diff(f) < 0):
            raise ContractError("knot forces must be non-decreasing")
        if n[0] != 0.0 or f[0] != 0.0:
            raise ContractError("first knot must be (0, 0)")
        n.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "norms", n)
        object.__setattr__(self, "newtons", f)


def pool_adjacent_violators(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted isotonic (non-decreasing) projection. Returns fitted values."""
    fitted = values.astype(float).copy()
    w = weights.astype(float).copy()
    # Blocks as (start, weight, mean); merge backwards while decreasing.
    starts, bw, bv = [], [], []
    for i in range(fitted.size):
        starts.append(i)
        bw.append(w[i])
        bv.append(fitted[i])
        while len(bv) > 1 and bv[-2] > bv[-1]:
            total = bw[-2] + bw[-1]
            merged = (bv[-2] * bw[-2] + bv[-1] * bw[-1]) / total
            starts.pop()
            bw[-2:] = [total]
            bv[-2:] = [merged]
    out = np.empty_like(fitted)
    bounds = starts + [fitted.size]
    for value, a, b in zip(bv, bounds[:-1], bounds[1:]):
        out[a:b] = value
    return out


def group_pairs(pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sort (norm, newton) pairs and average duplicates. Returns (norms, means, counts)."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ContractError("pairs must be a sequence of (norm, newton) tuples")
    if not np.all(np.isfinite(arr)):
        raise ContractError("calibration pairs contain non-finite values")
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    norms, index, counts = np.unique(arr[:, 0], return_index=True, return_counts=True)
    means = np.add.reduceat(arr[:, 1], index) / counts
    return norms, means, counts.astype(float)


def fit_calibration(pairs) -> CalibrationCurve:
    """Fit the monotone sensor-norm -> Newton curve from a calibration session.

    Isotonic projection of the per-norm mean forces, then piecewise-linear
    knots through the fitted values, anchored at (0, 0). At least two
    distinct norms are required.
    """
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ContractError("need at least 2 calibration pairs")
    norms, means, weights = group_pairs(arr)
    if norms.size < 2:
        raise DegeneracyError("all calibration pairs share one norm: no slope information")
    if norms[0] < 0:
        raise ContractError("sensor norms cannot be negative")
    if norms[0] != 0.0:
        norms = np.insert(norms, 0, 0.0)
        means = np.insert(means, 0, 0.0)
        weights = np.insert(weights, 0, 1.0)
    fitted = pool_adjacent_violators(means, weights)
    fitted = np.maximum(fitted, 0.0)
    fitted[0] = 0.0
    return CalibrationCurve(norms=norms, newtons=fitted)


def _interp(xq, xs, ys):
    """Piecewise-linear interpolation with terminal-slope extrapolation above
    the last knot; queries below the first knot clamp to it."""
    xq = np.asarray(xq, dtype=float)
    scalar = xq.ndim == 0
    x = np.atleast_1d(xq).copy()
    x[x < xs[0]] = xs[0]
    out = np.interp(x, xs, ys)
    beyond = x > xs[-1]
    if np.any(beyond):
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2]) if xs[-1] > xs[-2] else 0.0
        out[beyond] = ys[-1] + slope * (x[beyond] - xs[-1])
    return float(out[0]) if scalar else out


def norm_to_newton(curve: CalibrationCurve, x):
    """Map sensor norm(s) to Newtons (negative queries clamp to 0)."""
    return _interp(x, curve.norms, curve.newtons)


def newton_to_norm(curve: CalibrationCurve, f):
    """Inverse map. Exact inverse only on strictly increasing segments;
    flat segments resolve to their left edge."""
    keep = np.concatenate([[True], np.diff(curve.newtons) > 0])
    return _interp(f, curve.newtons[keep], curve.norms[keep])


def read_calibration_session(path) -> tuple[list[RawForceSample], np.ndarray]:
    """Parse a weighing-scale session CSV.

    Row format: timestamp, 15 magnetometer values (5 sensors x xyz),
    scale reading in Newtons. The first row's magnetometers are the rest
    baseline. Malformed rows raise with their line number.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p for p in line.split(",")]
            if len(parts) != 17:
                raise ContractError(f"session line {lineno}: expected 17 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ContractError(f"session line {lineno}: {exc}") from exc
    if not rows:
        raise ContractError("calibration session is empty")
    data = np.asarray(rows)
    baseline = data[0, 1:16].reshape(MAGNETOMETER_COUNT, 3)
    samples = [
        RawForceSample(timestamp=row[0], magnetometers=row[1:16].reshape(MAGNETOMETER_COUNT, 3), baseline=baseline)
        for row in data
    ]
    return samples, data[:, 16]


def save_curve(curve: CalibrationCurve, path) -> None:
    lines = ["# norm,newton"]
    for n, f in zip(curve.norms, curve.newtons):
        lines.append(f"{fmt_float(n)},{fmt_float(f)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_curve(path) -> CalibrationCurve:
    norms, newtons = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ContractError(f"curve line {lineno}: expected 'norm,newton'")
            norms.append(float(parts[0]))
            newtons.append(float(parts[1]))
    return CalibrationCurve(norms=np.array(norms), newtons=np.array(newtons))
