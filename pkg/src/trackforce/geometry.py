"""Calibrated two-view geometry, rigid transforms, and rotation encodings.

World frame convention: the robot base frame. Camera extrinsics map world
coordinates into the camera frame (z forward, x right, y down); pixels
follow the usual u-right / v-down convention.

All functions are pure and operate on immutable values; rotations returned
anywhere in this module are orthonormal with det +1 to within 1e-9.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegeneracyError, DomainError

# Orthonormality tolerance for rotation-valued fields.
ROTATION_TOL = 1e-9
# Smallest-singular-value ratio below which a linear system is treated as
# degenerate (rank-deficient for the purpose at hand).
DEGENERACY_RATIO = 1e-8


def _as_matrix(value, shape, name):
    m = np.array(value, dtype=float)
    if m.shape != shape:
        raise ContractError(f"{name} must have shape {shape}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError(f"{name} contains non-finite values")
    return m


def _check_rotation(r: np.ndarray, name: str = "rotation") -> None:
    if np.abs(r.T @ r - np.eye(3)).max() > ROTATION_TOL:
        raise ContractError(f"{name} is not orthonormal within {ROTATION_TOL}")
    if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
        raise ContractError(f"{name} must have determinant +1")


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid transform: x -> rotation @ x + translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _as_matrix(self.rotation, (3, 3), "rotation")
        tra = _as_matrix(self.translation, (3,), "translation")
        _check_rotation(rot)
        rot.flags.writeable = False
        tra.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        m = _as_matrix(m, (4, 4), "homogeneous transform")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > ROTATION_TOL:
            raise ContractError("bottom row of a rigid transform must be (0, 0, 0, 1)")
        return RigidTransform(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def invert(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points):
        """Transform one (3,) point or an (n, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraModel:
    """Calibrated pinhole camera.

    intrinsics: 3x3 pixel matrix, upper triangular with positive focal
    entries. extrinsics: world -> camera rigid transform.
    """

    intrinsics: np.ndarray
    extrinsics: RigidTransform

    def __post_init__(self):
        k = _as_matrix(self.intrinsics, (3, 3), "intrinsics")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ContractError("intrinsics focal entries must be positive")
        lower = np.array([k[1, 0], k[2, 0], k[2, 1]])
        if np.abs(lower).max() > ROTATION_TOL:
            raise ContractError("intrinsics must be zero below the diagonal")
        k.flags.writeable = False
        object.__setattr__(self, "intrinsics", k)
        if not isinstance(self.extrinsics, RigidTransform):
            object.__setattr__(self, "extrinsics", RigidTransform.from_matrix(self.extrinsics))

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.extrinsics.invert().translation

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix mapping homogeneous world points to pixels."""
        rt = np.hstack([self.extrinsics.rotation, self.extrinsics.translation[:, None]])
        return self.intrinsics @ rt


def camera_looking_at(position, target, up=(0.0, 0.0, 1.0), intrinsics=None) -> CameraModel:
    """Build a camera at ``position`` with its optical axis through ``target``."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ContractError("camera position and target coincide")
    z = forward / n
    x = np.cross(z, np.asarray(up, dtype=float))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ContractError("up direction is parallel to the viewing direction")
    x = x / nx
    y = np.cross(z, x)
    r_wc = np.stack([x, y, z])  # world -> camera rows
    if intrinsics is None:
        intrinsics = np.array([[1200.0, 0.0, 640.0], [0.0, 1200.0, 360.0], [0.0, 0.0, 1.0]])
    return CameraModel(intrinsics, RigidTransform(r_wc, -r_wc @ position))


def project(camera: CameraModel, point) -> np.ndarray:
    """Perspective-project a world point (meters) to pixel coordinates.

    Raises DomainError if the point is at or behind the camera plane.
    """
    p = np.asarray(point, dtype=float)
    if p.shape != (3,):
        raise ContractError(f"point must be a 3-vector, got shape {p.shape}")
    pc = camera.extrinsics.apply(p)
    if pc[2] <= 0.0:
        raise DomainError(f"point has non-positive depth {pc[2]:.6g} in the camera frame")
    uvw = camera.intrinsics @ pc
    return uvw[:2] / uvw[2]


def triangulate(cam_a: CameraModel, px_a, cam_b: CameraModel, px_b) -> np.ndarray:
    """Two-view linear (DLT) triangulation of a world point from pixels.

    For noiseless, consistent pixel pairs this inverts ``project``.
    Degenerate geometry (coincident camera centers, parallel rays) raises
    DegeneracyError carrying the condition number of the DLT system.
    """
    px_a = np.asarray(px_a, dtype=float)
    px_b = np.asarray(px_b, dtype=float)
    if px_a.shape != (2,) or px_b.shape != (2,):
        raise ContractError("pixel observations must be 2-vectors")

    if np.linalg.norm(cam_a.center() - cam_b.center()) < 1e-12:
        raise DegeneracyError("camera centers coincide (zero baseline)")

    rows = []
    for cam, px in ((cam_a, px_a), (cam_b, px_b)):
        p = cam.projection_matrix()
        rows.append(px[0] * p[2] - p[0])
        rows.append(px[1] * p[2] - p[1])
    a = np.stack(rows)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    a = a / norms

    _, s, vt = np.linalg.svd(a)
    cond = s[0] / s[3] if s[3] > 0 else np.inf
    # Two near-identical constraint pairs leave the solution underdetermined.
    if s[2] / s[0] < DEGENERACY_RATIO:
        raise DegeneracyError(
            "triangulation system is rank deficient (identical views?)", condition_number=cond
        )
    x = vt[3]
    if abs(x[3]) < DEGENERACY_RATIO * np.linalg.norm(x[:3]):
        raise DegeneracyError(
            "rays are (near-)parallel: triangulated point at infinity", condition_number=cond
        )
    return x[:3] / x[3]


def kabsch(source, target) -> RigidTransform:
    """Least-squares rigid transform T minimizing sum ||T(s_i) - t_i||^2.

    Orthogonal Procrustes with reflection correction. Requires at least
    three non-collinear point pairs in both sets.
    """
    src = np.asarray(source, dtype=float)
    tgt = np.asarray(target, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3 or tgt.shape != src.shape:
        raise ContractError(
            f"point sets must be matching (n, 3) arrays, got {src.shape} and {tgt.shape}"
        )
    if src.shape[0] < 3:
        raise ContractError("at least 3 point pairs are required")

    c_src = src.mean(axis=0)
    c_tgt = tgt.mean(axis=0)
    src_c = src - c_src
    tgt_c = tgt - c_tgt

    for pts, name in ((src_c, "source"), (tgt_c, "target")):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[1] < DEGENERACY_RATIO * sv[0] or sv[0] == 0.0:
            raise DegeneracyError(
                f"{name} points are collinear: rotation is not unique",
                condition_number=np.inf if sv[1] == 0 else sv[0] / sv[1],
            )

    h = src_c.T @ tgt_c
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, c_tgt - r @ c_src)


def encode_rotation6d(rotation) -> np.ndarray:
    """First two columns of a rotation matrix, flattened to a 6-vector."""
    r = _as_matrix(rotation, (3, 3), "rotation")
    _check_rotation(r)
    return np.concatenate([r[:, 0], r[:, 1]])


def decode_rotation6d(vector) -> np.ndarray:
    """Gram-Schmidt a 6-vector back to a rotation matrix.

    The two 3-vector halves must be linearly independent; the third column
    is completed by the cross product.
    """
    v = np.asarray(vector, dtype=float)
    if v.shape != (6,):
        raise ContractError(f"6D rotation encoding must have shape (6,), got {v.shape}")
    a, b = v[:3], v[3:]
    na = np.linalg.norm(a)
    if na < 1e-12:
        raise DegeneracyError("first half of the 6D encoding is (near) zero")
    c0 = a / na
    b_residual = b - (c0 @ b) * c0
    nb = np.linalg.norm(b_residual)
    if nb < DEGENERACY_RATIO * max(np.linalg.norm(b), 1e-12):
        raise DegeneracyError("6D encoding halves are (near) parallel")
    c1 = b_residual / nb
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=1)


@dataclass(frozen=True)
class CameraRig:
    """A calibrated two-camera rig (the only multi-view setup supported)."""

    cam_a: CameraModel
    cam_b: CameraModel


def default_rig() -> CameraRig:
    """Synthetic stereo pair overlooking the tabletop workspace.

    0.4 m baseline, 1200 px focal length: at ~1 m range this keeps the
    95th-percentile triangulation error under 5 mm for 0.5 px pixel noise.
    """
    target = (0.45, 0.0, 0.05)
    cam_a = camera_looking_at((0.25, -0.90, 0.55), target)
    cam_b = camera_looking_at((0.65, -0.90, 0.55), target)
    return CameraRig(cam_a, cam_b)


def save_rig(rig: CameraRig, path) -> None:
    from .fileio import atomic_write_text, fmt_row

    lines = ["# camera rig: per camera, 3x3 intrinsics rows then 4x4 extrinsics rows"]
    for name, cam in (("a", rig.cam_a), ("b", rig.cam_b)):
        lines.append(f"camera {name}")
        for row in cam.intrinsics:
            lines.append(fmt_row(row))
        for row in cam.extrinsics.matrix():
            lines.append(fmt_row(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_rig(path) -> CameraRig:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = [ln.strip() for ln in fh if ln.strip() and not ln.strip().startswith("#")]
    cameras = {}
    i = 0
    while i < len(tokens):
        head = tokens[i].split()
        if head[0] != "camera" or len(head) != 2:
            raise ContractError(f"rig file: expected 'camera <name>', got {tokens[i]!r}")
        if i + 7 > len(tokens):
            raise ContractError(f"rig file: truncated block for camera {head[1]!r}")
        try:
            k = np.array([[float(v) for v in tokens[i + 1 + r].split()] for r in range(3)])
            e = np.array([[float(v) for v in tokens[i + 4 + r].split()] for r in range(4)])
        except ValueError as exc:
            raise ContractError(f"rig file: non-numeric matrix entry ({exc})") from exc
        cameras[head[1]] = CameraModel(k, RigidTransform.from_matrix(e))
        i += 8
    if len(cameras) != 2:
        raise ContractError(f"rig file must define exactly 2 cameras, found {len(cameras)}")
    names = sorted(cameras)
    return CameraRig(cameras[names[0]], cameras[names[1]])
