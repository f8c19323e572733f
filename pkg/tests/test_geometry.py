import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trackforce.errors import ContractError, DegeneracyError, DomainError
from trackforce.geometry import (
    CameraModel,
    CameraRig,
    RigidTransform,
    camera_looking_at,
    decode_rotation6d,
    default_rig,
    encode_rotation6d,
    kabsch,
    load_rig,
    project,
    save_rig,
    triangulate,
)


def random_rotation(rng):
    return decode_rotation6d(rng.standard_normal(6))


def simple_camera(f=500.0, cx=320.0, cy=240.0, extrinsics=None):
    k = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
    return CameraModel(k, extrinsics or RigidTransform.identity())


class TestRigidTransform:
    def test_compose_invert_is_identity(self, rng):
        for _ in range(20):
            t = RigidTransform(random_rotation(rng), rng.standard_normal(3))
            ident = t.compose(t.invert())
            assert np.abs(ident.rotation - np.eye(3)).max() < 1e-9
            assert np.abs(ident.translation).max() < 1e-9

    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(ContractError):
            RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ContractError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_apply_matches_matrix_form(self, rng):
        t = RigidTransform(random_rotation(rng), rng.standard_normal(3))
        p = rng.standard_normal(3)
        hom = t.matrix() @ np.append(p, 1.0)
        assert np.allclose(t.apply(p), hom[:3])


class TestProject:
    def test_optical_axis_point_maps_to_principal_point(self):
        cam = simple_camera()
        assert np.allclose(project(cam, [0.0, 0.0, 1.0]), [320.0, 240.0])

    def test_hand_evaluated_offset(self):
        # u = fx * x / z + cx = 500 * 0.1 / 1 + 320
        cam = simple_camera()
        assert np.allclose(project(cam, [0.1, 0.0, 1.0]), [370.0, 240.0])

    def test_point_behind_camera_is_domain_error(self):
        cam = simple_camera()
        with pytest.raises(DomainError):
            project(cam, [0.0, 0.0, -1.0])
        with pytest.raises(DomainError):
            project(cam, [0.0, 0.0, 0.0])

    def test_intrinsics_validation(self):
        with pytest.raises(ContractError):
            CameraModel(np.array([[-5.0, 0, 0], [0, 5.0, 0], [0, 0, 1.0]]), RigidTransform.identity())
        with pytest.raises(ContractError):
            CameraModel(np.array([[5.0, 0, 0], [1.0, 5.0, 0], [0, 0, 1.0]]), RigidTransform.identity())


def two_camera_rig(baseline=0.2, f=500.0):
    cam_a = simple_camera(f=f)
    cam_b = simple_camera(
        f=f, extrinsics=RigidTransform(np.eye(3), np.array([-baseline, 0.0, 0.0]))
    )
    return cam_a, cam_b


class TestTriangulate:
    def test_project_then_triangulate_round_trip(self, rng):
        cam_a, cam_b = two_camera_rig()
        for _ in range(1000):
            p = np.array([rng.uniform(-0.3, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(0.5, 2.0)])
            q = triangulate(cam_a, project(cam_a, p), cam_b, project(cam_b, p))
            assert np.linalg.norm(q - p) < 1e-6

    def test_round_trip_on_random_posed_rigs(self, rng):
        for _ in range(100):
            center = rng.uniform(-0.5, 0.5, 3)
            cam_a = camera_looking_at(center + [0.0, -1.0, 0.4], center)
            cam_b = camera_looking_at(center + [0.3, -0.95, 0.45], center)
            p = center + rng.uniform(-0.2, 0.2, 3)
            q = triangulate(cam_a, project(cam_a, p), cam_b, project(cam_b, p))
            assert np.linalg.norm(q - p) < 1e-6

    def test_identical_cameras_degenerate(self):
        cam = simple_camera()
        with pytest.raises(DegeneracyError):
            triangulate(cam, np.array([320.0, 240.0]), cam, np.array([321.0, 240.0]))

    def test_noise_monte_carlo_95th_percentile(self, rng):
        # 0.5 px pixel noise at ~1 m range on the default rig: the 95th
        # percentile of 3D error stays under 5 mm.
        rig = default_rig()
        errors = []
        for _ in range(500):
            p = np.array([0.45, 0.0, 0.05]) + rng.uniform(-0.1, 0.1, 3)
            pa = project(rig.cam_a, p) + rng.normal(0.0, 0.5, 2)
            pb = project(rig.cam_b, p) + rng.normal(0.0, 0.5, 2)
            errors.append(np.linalg.norm(triangulate(rig.cam_a, pa, rig.cam_b, pb) - p))
        assert np.percentile(errors, 95) < 5e-3

    def test_reprojection_of_triangulated_point(self, rng):
        cam_a, cam_b = two_camera_rig()
        for _ in range(100):
            p = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.6, 1.5)])
            pa, pb = project(cam_a, p), project(cam_b, p)
            q = triangulate(cam_a, pa, cam_b, pb)
            assert np.linalg.norm(project(cam_a, q) - pa) < 1e-6
            assert np.linalg.norm(project(cam_b, q) - pb) < 1e-6


class TestKabsch:
    def test_identity_on_equal_point_sets(self, rng):
        pts = rng.standard_normal((8, 3))
        t = kabsch(pts, pts)
        assert np.abs(t.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(t.translation).max() < 1e-12

    def test_recovers_known_transform(self, rng):
        for _ in range(100):
            src = rng.standard_normal((6, 3))
            r = random_rotation(rng)
            t = rng.standard_normal(3)
            est = kabsch(src, src @ r.T + t)
            assert np.abs(est.rotation - r).max() < 1e-9
            assert np.abs(est.translation - t).max() < 1e-9

    def test_collinear_points_degenerate(self):
        line = np.outer(np.arange(3.0), np.array([1.0, 2.0, 0.5]))
        with pytest.raises(DegeneracyError):
            kabsch(line, line)

    def test_too_few_points(self):
        pts = np.zeros((2, 3))
        with pytest.raises(ContractError):
            kabsch(pts, pts)

    def test_equivariance_under_rigid_motion(self, rng):
        # kabsch(G s, G t) == G ∘ kabsch(s, t) ∘ G^-1
        src = rng.standard_normal((7, 3))
        tgt = rng.standard_normal((7, 3))
        g = RigidTransform(random_rotation(rng), rng.standard_normal(3))
        base = kabsch(src, tgt)
        moved = kabsch(g.apply(src), g.apply(tgt))
        conj = g.compose(base).compose(g.invert())
        assert np.abs(moved.rotation - conj.rotation).max() < 1e-8
        assert np.abs(moved.translation - conj.translation).max() < 1e-8

    def test_returns_proper_rotation_even_for_reflected_fits(self, rng):
        src = rng.standard_normal((5, 3))
        tgt = src.copy()
        tgt[:, 2] *= -1.0  # a reflection: best proper rotation is still det +1
        est = kabsch(src, tgt)
        assert abs(np.linalg.det(est.rotation) - 1.0) < 1e-9


class TestRotation6D:
    def test_identity_encoding(self):
        assert np.allclose(encode_rotation6d(np.eye(3)), [1, 0, 0, 0, 1, 0])

    def test_round_trip_random_rotations(self, rng):
        for _ in range(100):
            r = random_rotation(rng)
            assert np.abs(decode_rotation6d(encode_rotation6d(r)) - r).max() < 1e-9

    def test_decode_orthonormalizes_noisy_input(self, rng):
        v = rng.standard_normal(6)
        r = decode_rotation6d(v)
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(r) - 1.0) < 1e-9

    def test_parallel_halves_degenerate(self):
        with pytest.raises(DegeneracyError):
            decode_rotation6d(np.array([1.0, 0, 0, 2.0, 0, 0]))

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_decode_always_proper(self, seed):
        v = np.random.default_rng(seed).standard_normal(6)
        try:
            r = decode_rotation6d(v)
        except DegeneracyError:
            return
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(r) - 1.0) < 1e-9


class TestRigFiles:
    def test_save_load_round_trip(self, tmp_path):
        rig = default_rig()
        path = tmp_path / "rig.txt"
        save_rig(rig, path)
        loaded = load_rig(path)
        for orig, back in ((rig.cam_a, loaded.cam_a), (rig.cam_b, loaded.cam_b)):
            assert np.array_equal(orig.intrinsics, back.intrinsics)
            assert np.array_equal(orig.extrinsics.matrix(), back.extrinsics.matrix())

    def test_rejects_single_camera_file(self, tmp_path):
        rig = default_rig()
        path = tmp_path / "rig.txt"
        save_rig(rig, path)
        lines = path.read_text().splitlines()
        (tmp_path / "half.txt").write_text("\n".join(lines[:9]) + "\n")
        with pytest.raises(ContractError):
            load_rig(tmp_path / "half.txt")
