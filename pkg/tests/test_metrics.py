import math

import numpy as np
import pytest

from styleshape import metrics as M
from styleshape import renderer as R


def rand_eval(rng, h=8, w=8):
    pred = rng.uniform(0.9, 1.1, (h, w))
    true = rng.uniform(0.9, 1.1, (h, w))
    mask = (rng.random((h, w)) > 0.2).astype(np.float64)
    mask.flat[0] = 1.0  # never empty
    return M.DepthEval(pred, true, mask)


class TestSide:
    def test_zero_for_identical(self):
        d = np.random.default_rng(0).uniform(0.9, 1.1, (4, 4))
        ev = M.DepthEval(d, d, np.ones((4, 4)))
        assert M.side(ev) == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        base = rand_eval(rng)
        ref = M.side(base)
        for c in (0.5, 2.0):
            scaled = M.DepthEval(base.predicted * c, base.truth, base.mask)
            assert abs(M.side(scaled) - ref) < 1e-12

    def test_two_pixel_value(self):
        # delta = (0, 1) -> sqrt(0.5 - 0.25) = 0.5
        ev = M.DepthEval(np.array([1.0, math.e]), np.array([1.0, 1.0]), np.ones(2))
        assert abs(M.side(ev) - 0.5) < 1e-12

    def test_empty_mask_rejected(self):
        with pytest.raises(M.MetricError, match="mask"):
            M.side(M.DepthEval(np.ones(4), np.ones(4), np.zeros(4)))

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(M.MetricError):
            M.side(M.DepthEval(np.array([1.0, -1.0]), np.ones(2), np.ones(2)))


class TestMad:
    def test_zero_for_identical(self):
        # arccos roundoff near dot=1 leaves ~1e-7 degrees of noise
        K = R.make_intrinsics(8, 8, 10.0)
        rng = np.random.default_rng(2)
        d = rng.uniform(0.95, 1.05, (8, 8))
        assert M.mad(M.DepthEval(d, d, np.ones((8, 8))), K) < 1e-5

    def test_range_bounds(self):
        K = R.make_intrinsics(8, 8, 10.0)
        rng = np.random.default_rng(3)
        for seed in range(3):
            r = np.random.default_rng(seed)
            ev = M.DepthEval(
                r.uniform(0.9, 1.1, (8, 8)), r.uniform(0.9, 1.1, (8, 8)), np.ones((8, 8))
            )
            val = M.mad(ev, K)
            assert 0.0 <= val <= 180.0

    def test_symmetric_in_arguments(self):
        K = R.make_intrinsics(8, 8, 10.0)
        rng = np.random.default_rng(4)
        ev = rand_eval(rng)
        swapped = M.DepthEval(ev.truth, ev.predicted, ev.mask)
        assert abs(M.mad(ev, K) - M.mad(swapped, K)) < 1e-12

    def test_orthogonal_normals_ninety_degrees(self):
        # checked at the formula level: the metric is arccos of the dot
        a = np.array([0.0, 0.0, 1.0])
        b = np.array([1.0, 0.0, 0.0])
        assert abs(math.degrees(math.acos(np.dot(a, b))) - 90.0) < 1e-12


class TestSdc:
    def test_ground_truth_against_itself_is_exact(self):
        rng = np.random.default_rng(5)
        gt = rng.uniform(0.9, 1.1, (7, M.KEYPOINT_COUNT))
        assert M.sdc(M.KeypointDepthSet(gt, gt)) == 66.0

    def test_affine_invariance(self):
        rng = np.random.default_rng(6)
        gt = rng.uniform(0.9, 1.1, (9, M.KEYPOINT_COUNT))
        pred = 3.7 * gt + 0.2
        assert abs(M.sdc(M.KeypointDepthSet(pred, gt)) - 66.0) < 1e-9

    def test_anticorrelated_is_minus_66(self):
        rng = np.random.default_rng(7)
        gt = rng.uniform(0.9, 1.1, (5, M.KEYPOINT_COUNT))
        assert abs(M.sdc(M.KeypointDepthSet(-gt, gt)) + 66.0) < 1e-9

    def test_zero_gt_variance_names_keypoint(self):
        rng = np.random.default_rng(8)
        gt = rng.uniform(0.9, 1.1, (4, M.KEYPOINT_COUNT))
        gt[:, 13] = 1.0
        with pytest.raises(M.MetricError, match="13"):
            M.sdc(M.KeypointDepthSet(gt + 0.01 * rng.random(gt.shape), gt))

    def test_constant_prediction_scores_zero(self):
        rng = np.random.default_rng(9)
        gt = rng.uniform(0.9, 1.1, (4, M.KEYPOINT_COUNT))
        pred = np.ones_like(gt)
        assert M.sdc(M.KeypointDepthSet(pred, gt)) == 0.0

    def test_too_few_examples_rejected(self):
        with pytest.raises(M.MetricError):
            M.sdc(M.KeypointDepthSet(np.ones((1, 66)), np.ones((1, 66))))


class TestOracleEquivalence:
    def test_side_matches_reference(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            ev = rand_eval(rng)
            assert abs(M.side(ev) - M.side_reference(ev)) < 1e-10

    def test_mad_matches_reference(self):
        K = R.make_intrinsics(6, 6, 10.0)
        rng = np.random.default_rng(11)
        for _ in range(25):
            ev = rand_eval(rng, 6, 6)
            assert abs(M.mad(ev, K) - M.mad_reference(ev, K)) < 1e-10

    def test_sdc_matches_reference(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            n = rng.integers(2, 9)
            gt = rng.uniform(0.9, 1.1, (n, M.KEYPOINT_COUNT))
            pred = gt + rng.normal(0, 0.05, gt.shape)
            kps = M.KeypointDepthSet(pred, gt)
            assert abs(M.sdc(kps) - M.sdc_reference(kps)) < 1e-10
