import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakseg.imgcore import BG, FG, IGNORE
from weakseg.losses import (DegenerateRegionError, LossConfig, bce_loss,
                            finite_diff_check, iou_loss, region_means,
                            rls_loss, seg_loss)


def tri(values):
    return np.asarray(values, dtype=np.int8)


class TestBce:
    def test_perfect_prediction_floor(self):
        g = tri([[FG, BG, FG, BG]])
        p = np.array([[1.0, 0.0, 1.0, 0.0]])
        out = bce_loss(p, g)
        assert out.value <= -np.log1p(-1e-7) + 1e-12

    def test_symmetry_point(self):
        out = bce_loss(np.array([[0.5]]), tri([[FG]]))
        assert abs(out.value - np.log(2)) < 1e-12

    def test_ignore_pixel_excluded(self):
        out = bce_loss(np.array([[0.9, 0.2]]), tri([[FG, IGNORE]]))
        assert abs(out.value - (-np.log(0.9))) < 1e-12
        assert out.grad[0, 1] == 0.0

    def test_all_ignore_rejected(self):
        with pytest.raises(ValueError):
            bce_loss(np.array([[0.5]]), tri([[IGNORE]]))

    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 0.95, (8, 8))
        g = rng.integers(0, 3, (8, 8)).astype(np.int8)

        def fn(x):
            r = bce_loss(x, g)
            return r.value, r.grad

        assert finite_diff_check(fn, p) < 1e-4


class TestIou:
    def test_identity(self):
        g = tri([[FG, BG], [BG, FG]])
        p = (g == FG).astype(float)
        assert iou_loss(p, g).value == 0.0

    def test_disjoint(self):
        g = tri([[FG, BG]])
        p = np.array([[0.0, 1.0]])
        assert iou_loss(p, g).value == 1.0

    def test_half_overlap_arithmetic(self):
        out = iou_loss(np.array([[0.5, 0.5]]), tri([[FG, BG]]))
        assert abs(out.value - 2.0 / 3.0) < 1e-12

    def test_empty_empty_convention(self):
        out = iou_loss(np.zeros((2, 2)), tri(np.full((2, 2), BG)))
        assert out.value == 0.0
        assert np.all(out.grad == 0.0)

    def test_finite_differences(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.05, 0.95, (8, 8))
        g = rng.integers(0, 3, (8, 8)).astype(np.int8)

        def fn(x):
            r = iou_loss(x, g)
            return r.value, r.grad

        assert finite_diff_check(fn, p) < 1e-4

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_range_invariant(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0, 1, (5, 5))
        g = rng.integers(0, 3, (5, 5)).astype(np.int8)
        if (g != IGNORE).sum() == 0:
            g[0, 0] = FG
        assert 0.0 <= iou_loss(p, g).value <= 1.0
        assert bce_loss(p, g).value >= 0.0


class TestRegionMeans:
    def test_constant_image(self):
        p = np.array([[0.2, 0.9], [0.4, 0.6]])
        img = np.full((2, 2), 0.7)
        m = region_means(p, img, np.ones((2, 2), bool))
        assert abs(m.c1 - 0.7) < 1e-12 and abs(m.c2 - 0.7) < 1e-12

    def test_two_phase_exact(self):
        img = np.array([[0.9, 0.9, 0.1, 0.1]])
        p = np.array([[1.0, 1.0, 0.0, 0.0]])
        m = region_means(p, img, np.ones((1, 4), bool))
        assert m.c1 == 0.9 and m.c2 == 0.1

    def test_weighted_mean_arithmetic(self):
        img = np.array([[0.0, 0.2, 0.8, 1.0]])
        p = np.array([[0.9, 0.8, 0.1, 0.2]])
        m = region_means(p, img, np.ones((1, 4), bool))
        assert abs(m.c1 - 0.22) < 1e-12
        assert abs(m.c2 - 0.78) < 1e-12

    def test_degenerate_region(self):
        with pytest.raises(DegenerateRegionError):
            region_means(np.zeros((2, 2)), np.ones((2, 2)) * 0.5,
                         np.ones((2, 2), bool))


class TestRls:
    def test_two_phase_zero(self):
        img = np.array([[0.9, 0.9, 0.1, 0.1]])
        p = np.array([[1.0, 1.0, 0.0, 0.0]])
        out = rls_loss(p, img, np.ones((1, 4), bool))
        assert abs(out.value) < 1e-15

    def test_constant_image_zero(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.1, 0.9, (4, 4))
        out = rls_loss(p, np.full((4, 4), 0.3), np.ones((4, 4), bool))
        assert abs(out.value) < 1e-15

    def test_four_pixel_arithmetic(self):
        img = np.array([[0.0, 0.2, 0.8, 1.0]])
        p = np.array([[0.9, 0.8, 0.1, 0.2]])
        out = rls_loss(p, img, np.ones((1, 4), bool),
                       LossConfig(lambda1=1.0, lambda2=3.0))
        assert abs(out.value - 0.1752) < 1e-12

    def test_outside_region_invariance(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (6, 6))
        region = np.zeros((6, 6), bool)
        region[1:5, 1:5] = True
        p = rng.uniform(0.1, 0.9, (6, 6))
        base = rls_loss(p, img, region)
        p2 = p.copy()
        p2[~region] = rng.uniform(0, 1, (~region).sum())
        pert = rls_loss(p2, img, region)
        assert base.value == pert.value
        assert np.array_equal(base.grad, pert.grad)
        assert np.all(base.grad[~region] == 0.0)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, (5, 5))
        p = rng.uniform(0.1, 0.9, (5, 5))
        region = rng.uniform(0, 1, (5, 5)) < 0.8
        region[0, :2] = True
        a = rls_loss(p, img, region, LossConfig(lambda1=1.0, lambda2=3.0))
        b = rls_loss(1.0 - p, img, region, LossConfig(lambda1=3.0, lambda2=1.0))
        assert abs(a.value - b.value) < 1e-12

    def test_finite_differences_frozen_means(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, (8, 8))
        p0 = rng.uniform(0.05, 0.95, (8, 8))
        region = rng.uniform(0, 1, (8, 8)) < 0.7
        region[0, :2] = True
        cfg = LossConfig()
        frozen = region_means(p0, img, region)
        n = int(region.sum())
        d1 = (img - frozen.c1) ** 2
        d2 = (img - frozen.c2) ** 2

        def fn(x):
            val = float((cfg.lambda1 * x * d1
                         + cfg.lambda2 * (1 - x) * d2)[region].sum()) / n
            grad = np.zeros_like(x)
            grad[region] = (cfg.lambda1 * d1[region]
                            - cfg.lambda2 * d2[region]) / n
            return val, grad

        assert finite_diff_check(fn, p0) < 1e-4

    def test_finite_differences_through_means(self):
        # the region means are weighted least-squares minimizers, so
        # differentiating through them adds nothing at the evaluation point
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 1, (8, 8))
        p0 = rng.uniform(0.05, 0.95, (8, 8))
        region = rng.uniform(0, 1, (8, 8)) < 0.7
        region[0, :2] = True

        def fn(x):
            r = rls_loss(x, img, region)
            return r.value, r.grad

        assert finite_diff_check(fn, p0) < 1e-4

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            img = rng.uniform(0, 1, (5, 5))
            p = rng.uniform(0.05, 0.95, (5, 5))
            assert rls_loss(p, img, np.ones((5, 5), bool)).value >= 0.0


class TestSegLoss:
    def _triple(self, seed):
        rng = np.random.default_rng(seed)
        preds, masks = [], []
        for s in (4, 2, 1):
            preds.append(rng.uniform(0.05, 0.95, (8 // s, 8 // s)))
            masks.append(rng.integers(0, 2, (8 // s, 8 // s)).astype(np.int8))
        return preds, masks

    def test_perfect_prediction_floor(self):
        rng = np.random.default_rng(8)
        preds, masks = [], []
        for s in (4, 2, 1):
            g = rng.integers(0, 2, (8 // s, 8 // s)).astype(np.int8)
            masks.append(g)
            preds.append((g == FG).astype(float))
        value, _ = seg_loss(preds, masks)
        assert value <= 3 * -np.log1p(-1e-7) + 1e-12

    def test_recomposition(self):
        preds, masks = self._triple(9)
        value, grads = seg_loss(preds, masks)
        expect = sum(bce_loss(p, g).value + iou_loss(p, g).value
                     for p, g in zip(preds, masks))
        assert abs(value - expect) < 1e-12
        for p, g, got in zip(preds, masks, grads):
            ref = bce_loss(p, g).grad + iou_loss(p, g).grad
            assert np.allclose(got, ref, atol=1e-15)

    def test_shape_mismatch(self):
        preds, masks = self._triple(10)
        masks[1] = masks[1][:1]
        with pytest.raises(ValueError):
            seg_loss(preds, masks)


def test_finite_diff_check_quadratic():
    def fn(x):
        return float((x ** 2).sum()), 2 * x

    rng = np.random.default_rng(11)
    # keep coordinates away from zero so fd roundoff stays below 1e-9 relative
    x = rng.uniform(0.1, 1, (4, 4)) * rng.choice([-1.0, 1.0], (4, 4))
    assert finite_diff_check(fn, x) < 1e-9
