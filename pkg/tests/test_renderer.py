import math

import numpy as np
import pytest

from styleshape import renderer as R
from styleshape import tensor as T
from styleshape.tensor import Tensor


def smooth_depth(h, w, seed=0, amp=0.06):
    """A smooth in-range depth surface for warp tests."""
    rng = np.random.default_rng(seed)
    v, u = np.meshgrid(np.linspace(0, math.pi, h), np.linspace(0, math.pi, w), indexing="ij")
    d = 1.0 + amp * (np.sin(u + rng.uniform(0, 1)) * np.cos(v + rng.uniform(0, 1)))
    return d[None]


class TestIntrinsics:
    def test_values_at_64px_10deg(self):
        K = R.make_intrinsics(64, 64, 10.0)
        assert K.c_u == 31.5 and K.c_v == 31.5
        assert abs(K.f - 63.0 / (2.0 * math.tan(math.radians(5.0)))) < 1e-12
        assert abs(K.f - 360.046) < 1e-3

    def test_tiny_wide_camera(self):
        K = R.make_intrinsics(2, 2, 90.0)
        assert abs(K.f - 0.5) < 1e-15

    def test_center_is_image_center(self):
        K = R.make_intrinsics(17, 9, 25.0)
        assert K.c_u == 8.0 and K.c_v == 4.0

    def test_bad_fov_rejected(self):
        with pytest.raises(R.RenderError):
            R.make_intrinsics(8, 8, 180.0)
        with pytest.raises(R.RenderError):
            R.make_intrinsics(8, 8, 0.0)


class TestNormals:
    def test_flat_plane_points_at_camera(self):
        K = R.make_intrinsics(16, 16, 10.0)
        n = R.compute_normals(Tensor(np.full((1, 16, 16), 1.0)), K).data
        assert np.allclose(n[0], 0.0, atol=1e-12)
        assert np.allclose(n[1], 0.0, atol=1e-12)
        assert np.allclose(n[2], 1.0, atol=1e-12)

    def test_u_ramp_tilts_normals_away_from_u(self):
        K = R.make_intrinsics(16, 16, 10.0)
        u = np.arange(16, dtype=np.float64)
        d = np.broadcast_to(1.0 + 0.005 * u, (16, 16)).copy()[None]
        n = R.compute_normals(Tensor(d), K).data
        assert np.all(n[0] < 0.0)

    def test_unit_length_everywhere(self):
        K = R.make_intrinsics(10, 12, 10.0)  # width 10, height 12
        n = R.compute_normals(Tensor(smooth_depth(12, 10, seed=3)), K).data
        norms = np.sqrt((n**2).sum(axis=0))
        assert np.allclose(norms, 1.0, atol=1e-12)

    def test_nonpositive_depth_rejected(self):
        K = R.make_intrinsics(4, 4, 10.0)
        with pytest.raises(R.RenderError):
            R.compute_normals(Tensor(np.zeros((1, 4, 4))), K)

    def test_gradient_wrt_depth(self):
        K = R.make_intrinsics(6, 6, 10.0)
        d0 = smooth_depth(6, 6, seed=5)
        w = np.random.default_rng(1).normal(size=(3, 6, 6))

        def f(d):
            return T.sum_(R.compute_normals(d, K) * Tensor(w))

        analytic = T.gradient_of(f, d0)
        fd = T.finite_diff_gradient(lambda x: f(Tensor(x)).item(), d0, eps=1e-6)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1.0)
        assert np.max(np.abs(analytic - fd) / denom) < 1e-6


class TestShade:
    def test_pure_ambient_returns_albedo(self):
        a = np.random.default_rng(0).random((3, 4, 4))
        n = np.zeros((3, 4, 4))
        n[2] = 1.0
        light = R.LightParams.from_values(1.0, 0.0, 0.0, 0.0)
        out = R.shade(Tensor(a), Tensor(n), light).data
        assert np.allclose(out, a, atol=1e-15)

    def test_frontal_lit_plane_value(self):
        a = np.full((3, 2, 2), 0.5)
        n = np.zeros((3, 2, 2))
        n[2] = 1.0
        light = R.LightParams.from_values(0.2, 0.8, 0.0, 0.0)
        out = R.shade(Tensor(a), Tensor(n), light).data
        assert np.allclose(out, 0.5, atol=1e-15)

    def test_orthogonal_light_leaves_ambient_only(self):
        a = np.full((3, 2, 2), 0.4)
        n = np.zeros((3, 2, 2))
        n[0] = 1.0  # normal along +x
        k_s = 0.3
        light = R.LightParams.from_values(k_s, 0.7, 0.0, 0.0)
        out = R.shade(Tensor(a), Tensor(n), light).data
        assert np.allclose(out, 0.4 * k_s, atol=1e-15)

    def test_monotone_in_ambient_and_diffuse(self):
        rng = np.random.default_rng(2)
        a = rng.random((3, 5, 5))
        K = R.make_intrinsics(5, 5, 10.0)
        n = R.compute_normals(Tensor(smooth_depth(5, 5, seed=9)), K)
        base = R.shade(Tensor(a), n, R.LightParams.from_values(0.3, 0.5, 0.2, -0.1)).data
        more_s = R.shade(Tensor(a), n, R.LightParams.from_values(0.4, 0.5, 0.2, -0.1)).data
        more_d = R.shade(Tensor(a), n, R.LightParams.from_values(0.3, 0.6, 0.2, -0.1)).data
        assert np.all(more_s >= base) and np.all(more_d >= base)

    def test_gradient_wrt_depth_through_normals(self):
        K = R.make_intrinsics(6, 6, 10.0)
        d0 = smooth_depth(6, 6, seed=11)
        a = np.random.default_rng(3).random((3, 6, 6))
        light = R.LightParams.from_values(0.3, 0.6, 0.3, 0.2)
        w = np.random.default_rng(4).normal(size=(3, 6, 6))

        def f(d):
            return T.sum_(R.shade(Tensor(a), R.compute_normals(d, K), light) * Tensor(w))

        analytic = T.gradient_of(f, d0)
        fd = T.finite_diff_gradient(lambda x: f(Tensor(x)).item(), d0, eps=1e-6)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1.0)
        assert np.max(np.abs(analytic - fd) / denom) < 1e-6


class TestEulerRotation:
    def test_zero_angles_identity(self):
        rot = R.euler_rotation(Tensor(np.zeros(3))).data
        assert np.array_equal(rot, np.eye(3))

    def test_y_quarter_turn_maps_z_to_x(self):
        rot = R.euler_rotation(Tensor([0.0, math.pi / 2, 0.0])).data
        assert np.allclose(rot @ np.array([0.0, 0.0, 1.0]), [1.0, 0.0, 0.0], atol=1e-15)

    def test_orthonormal_for_random_angles(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            rot = R.euler_rotation(Tensor(rng.uniform(-1.0, 1.0, 3))).data
            assert np.allclose(rot.T @ rot, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(rot) - 1.0) < 1e-12


class TestReproject:
    def test_identity_view_roundtrip(self):
        K = R.make_intrinsics(16, 16, 10.0)
        rng = np.random.default_rng(0)
        J = Tensor(rng.random((3, 16, 16)))
        d = Tensor(smooth_depth(16, 16, seed=1))
        img, warped, mask = R.reproject(J, d, R.Viewpoint.zero(), K)
        assert np.max(np.abs(img.data - J.data)) < 1e-9
        assert np.max(np.abs(warped.data - d.data)) < 1e-9
        assert np.all(mask.data == 1.0)

    def test_center_pixel_fixed_under_z_translation(self):
        # K^-1 (c_u, c_v, 1) = (0, 0, 1), so p' stays at the center
        K = R.make_intrinsics(17, 17, 10.0)
        d = Tensor(np.full((1, 17, 17), 1.0))
        J = Tensor(np.zeros((3, 17, 17)))
        view = R.Viewpoint.from_values([0, 0, 0, 0, 0, 0.05])
        _, warped, mask = R.reproject(J, d, view, K)
        cu = cv = 8
        assert mask.data[0, cv, cu] == 1.0
        assert abs(warped.data[0, cv, cu] - 1.05) < 1e-9

    def test_all_behind_camera_rejected(self):
        K = R.make_intrinsics(8, 8, 10.0)
        d = Tensor(np.full((1, 8, 8), 1.0))
        J = Tensor(np.zeros((3, 8, 8)))
        view = R.Viewpoint.from_values([0, 0, 0, 0, 0, -2.0])
        with pytest.raises(R.RenderError, match="behind"):
            R.reproject(J, d, view, K)

    def test_rotation_moves_content_and_masks_borders(self):
        K = R.make_intrinsics(32, 32, 10.0)
        rng = np.random.default_rng(5)
        J = Tensor(rng.random((3, 32, 32)))
        d = Tensor(smooth_depth(32, 32, seed=2))
        view = R.Viewpoint.from_values([0.0, 0.3, 0.0, 0.0, 0.0, 0.0])
        img, warped, mask = R.reproject(J, d, view, K)
        assert 0.5 < mask.data.mean() < 1.0  # some border pixels uncovered
        covered = mask.data[0] == 1.0
        assert np.all(warped.data[0][covered] > 0.5)
        assert np.all(warped.data[0][~covered] == 1.0)  # fill value

    def test_gradients_wrt_depth_canonical_and_pose(self):
        K = R.make_intrinsics(8, 8, 10.0)
        rng = np.random.default_rng(7)
        J0 = rng.random((3, 8, 8))
        d0 = smooth_depth(8, 8, seed=13, amp=0.05)
        w0 = np.array([0.04, -0.06, 0.02, 0.01, -0.012, 0.02])
        weights = rng.normal(size=(3, 8, 8))
        wd = rng.normal(size=(1, 8, 8))

        def render(J, d, w):
            img, warped, mask = R.reproject(J, d, R.Viewpoint(w), K)
            return T.sum_(img * Tensor(weights)) + T.sum_(warped * Tensor(wd))

        def check(f, x0, tol):
            analytic = T.gradient_of(f, x0)
            fd = T.finite_diff_gradient(lambda x: f(Tensor(x)).item(), x0, eps=1e-6)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1.0)
            assert np.max(np.abs(analytic - fd) / denom) < tol

        check(lambda J: render(J, Tensor(d0), Tensor(w0)), J0, 1e-6)
        check(lambda d: render(Tensor(J0), d, Tensor(w0)), d0, 1e-4)
        check(lambda w: render(Tensor(J0), Tensor(d0), w), w0, 1e-4)

    def test_coverage_map_returned_on_request(self):
        K = R.make_intrinsics(8, 8, 10.0)
        J = Tensor(np.zeros((3, 8, 8)))
        d = Tensor(np.full((1, 8, 8), 1.0))
        out = R.reproject(J, d, R.Viewpoint.zero(), K, return_coverage=True)
        assert len(out) == 4
        cover = out[3]
        assert cover.shape == (8, 8) and np.all(cover >= 0)
