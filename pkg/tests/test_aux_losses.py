import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from bboxmask.aux_losses import (
    TERMS,
    FocalParams,
    NonFiniteLossError,
    ciou_loss,
    heatmap_focal_loss,
    masked_bbox_loss,
    total_loss,
)
from bboxmask.core import InvalidBoxError, InvalidShapeError
from bboxmask.embedding import LossResult
from bboxmask.gradcheck import FDConfig, check_gradient


def corners(ltrb, anchor=(0.0, 0.0)):
    l, t, r, b = ltrb
    return anchor[0] - l, anchor[1] - t, anchor[0] + r, anchor[1] + b


class TestFocal:
    def test_positive_pixel(self):
        res = heatmap_focal_loss(np.full((1, 1, 1), 0.5), np.ones((1, 1, 1)))
        assert res.value == pytest.approx(0.17328679513998632, rel=1e-14)

    def test_negative_pixel_floor(self):
        res = heatmap_focal_loss(np.full((1, 1, 1), 0.5), np.full((1, 1, 1), 0.5))
        assert res.value == pytest.approx(0.010830424696249145, rel=1e-14)

    @pytest.mark.parametrize("eps", [1e-3, 1e-6, 1e-9])
    def test_perfect_prediction_vanishes(self, eps):
        target = np.zeros((1, 4, 4))
        target[0, 1, 2] = 1.0
        res = heatmap_focal_loss(target.copy(), target, FocalParams(clamp_eps=eps))
        assert 0 <= res.value < 10 * eps

    def test_normalized_by_positives(self):
        target = np.zeros((1, 3, 3))
        target[0, 0, 0] = target[0, 2, 2] = 1.0
        pred = np.full_like(target, 0.5)
        res = heatmap_focal_loss(pred, target)
        per_pos = 0.25 * math.log(2)
        per_neg = 0.25 * math.log(2)  # p^2 * -log(1 - p) at p = 0.5, weight 1
        assert res.value == pytest.approx((2 * per_pos + 7 * per_neg) / 2, rel=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShapeError):
            heatmap_focal_loss(np.zeros((1, 2, 2)), np.zeros((1, 3, 2)))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        target = rng.uniform(size=(2, 5, 5)) ** 3
        target[0, 2, 2] = 1.0
        x = rng.uniform(0.05, 0.95, size=target.shape)

        def fn(z):
            r = heatmap_focal_loss(z, target)
            return r.value, r.grad

        assert check_gradient(fn, x).passed

    def test_non_integer_alpha_gradient(self):
        target = np.array([[[1.0, 0.3]]])
        params = FocalParams(alpha=0.5, gamma=1.5)

        def fn(z):
            r = heatmap_focal_loss(z, target, params)
            return r.value, r.grad

        assert check_gradient(fn, np.array([[[0.4, 0.6]]])).passed

    def test_clamped_gradient_is_zero(self):
        res = heatmap_focal_loss(np.array([[[0.0, 1.0]]]), np.array([[[1.0, 0.0]]]))
        assert np.isfinite(res.value)
        np.testing.assert_array_equal(res.grad, 0.0)

    def test_params(self):
        with pytest.raises(ValueError):
            FocalParams(clamp_eps=0.5)
        with pytest.raises(ValueError):
            FocalParams(alpha=-1)


class TestCiou:
    def test_identity(self):
        assert ciou_loss([1, 2, 3, 4], [1, 2, 3, 4]).value == pytest.approx(0.0, abs=1e-15)

    def test_quarter_area(self):
        # Boxes (0,0,2,2) and (0,0,4,4) in corner form, both anchored at the origin.
        res = ciou_loss([0, 0, 2, 2], [0, 0, 4, 4])
        assert res.value == pytest.approx(0.8125, rel=1e-14)
        assert res.value == pytest.approx(oracles.ciou((0, 0, 2, 2), (0, 0, 4, 4)), rel=1e-14)

    def test_same_aspect_disjoint(self):
        pred, target = [1, 1, 1, 1], [-4, 1, 6, 1]  # centers 5 apart, both 2x2
        res = ciou_loss(pred, target)
        rho2, c2 = 25.0, 7.0**2 + 2.0**2
        assert res.value == pytest.approx(1 + rho2 / c2, rel=1e-14)

    def test_invalid(self):
        with pytest.raises(InvalidBoxError):
            ciou_loss([1, 0, -1, 1], [1, 1, 1, 1])

    def test_anchor_cancels(self):
        a = ciou_loss([1, 2, 3, 1], [2, 2, 2, 2], (0, 0))
        b = ciou_loss([1, 2, 3, 1], [2, 2, 2, 2], (10.5, -3))
        assert a.value == pytest.approx(b.value, abs=1e-14)
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-14)

    def test_stop_grad_option(self):
        pred, target = [1.0, 2.0, 3.0, 0.5], [2.0, 1.0, 1.0, 2.0]
        exact = ciou_loss(pred, target)
        stopped = ciou_loss(pred, target, alpha_stop_grad=True)
        assert exact.value == stopped.value
        assert not np.allclose(exact.grad, stopped.grad)

        def fn(z):
            r = ciou_loss(z.reshape(4), target)
            return r.value, r.grad.reshape(z.shape)

        assert check_gradient(fn, np.array(pred)).passed

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.2, 5.0), min_size=8, max_size=8))
    def test_matches_literal_formula(self, vals):
        pred, target = vals[:4], vals[4:]
        res = ciou_loss(pred, target)
        assert res.value == pytest.approx(oracles.ciou(corners(pred), corners(target)), rel=1e-12, abs=1e-14)
        assert 0 <= res.value < 2.5

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.5, 3.0), st.floats(0.5, 3.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone_in_iou(self, w, h, s1, s2):
        # Concentric, same-aspect boxes: rho = 0 and v = 0, so only IoU moves.
        assume(abs(s1 - s2) > 1e-6)
        small, large = sorted((s1, s2))
        target = [w, h, w, h]
        near = [w * (0.5 + 0.5 * large), h * (0.5 + 0.5 * large)] * 2
        far = [w * (0.5 + 0.5 * small), h * (0.5 + 0.5 * small)] * 2
        a, b = ciou_loss(near, target), ciou_loss(far, target)
        assert a.parts["iou"] >= b.parts["iou"]
        assert a.value <= b.value + 1e-12


class TestMaskedBbox:
    def test_identity(self):
        rng = np.random.default_rng(1)
        t = rng.uniform(0.5, 3, size=(4, 3, 3))
        mask = np.ones((1, 3, 3))
        res = masked_bbox_loss(t, t, mask)
        assert res.value == pytest.approx(0.0, abs=1e-14)

    def test_empty_mask(self):
        rng = np.random.default_rng(2)
        res = masked_bbox_loss(rng.uniform(1, 2, (4, 2, 2)), rng.uniform(1, 2, (4, 2, 2)), np.zeros((1, 2, 2)))
        assert res.value == 0.0
        assert not res.grad.any()

    def test_mean_of_two_pixels(self):
        pred = np.ones((4, 2, 3))
        target = np.ones((4, 2, 3))
        pred[:, 0, 1] = [0, 0, 2, 2]
        target[:, 0, 1] = [0, 0, 4, 4]
        pred[:, 1, 2] = [1, 1, 1, 1]
        target[:, 1, 2] = [-4, 1, 6, 1]
        mask = np.zeros((1, 2, 3))
        mask[0, 0, 1] = mask[0, 1, 2] = 1
        want = (
            oracles.ciou(corners(pred[:, 0, 1], (1, 0)), corners(target[:, 0, 1], (1, 0)))
            + oracles.ciou(corners(pred[:, 1, 2], (2, 1)), corners(target[:, 1, 2], (2, 1)))
        ) / 2
        res = masked_bbox_loss(pred, target, mask)
        assert res.value == pytest.approx(want, rel=1e-14)
        assert res.grad[:, 1, 1].sum() == 0.0

    def test_shapes(self):
        with pytest.raises(InvalidShapeError):
            masked_bbox_loss(np.ones((4, 2, 2)), np.ones((4, 2, 2)), np.ones((1, 3, 2)))


def result(value, shape=(2,)):
    return LossResult(value, np.full(shape, value))


class TestTotalLoss:
    def test_sum(self):
        parts = {name: result(v) for name, v in zip(TERMS, (0.1, 0.2, 0.3, 0.4, 0.5))}
        total, grads = total_loss(parts)
        assert total == pytest.approx(1.5, abs=1e-15)
        assert set(grads) == set(TERMS)

    def test_naive_sum(self):
        rng = np.random.default_rng(3)
        parts = {name: result(float(rng.uniform())) for name in TERMS}
        total, _ = total_loss(parts)
        naive = 0.0
        for name in TERMS:
            naive += parts[name].value
        assert total == naive

    def test_zero_part_drops_out(self):
        parts = {"kpt": LossResult(0.0, np.zeros(3)), "emb": LossResult(1.0, np.ones(3))}
        total, grads = total_loss(parts)
        assert total == 1.0
        assert not grads["kpt"].any()

    def test_weights(self):
        total, grads = total_loss({"bbox": result(2.0)}, {"bbox": 0.5})
        assert total == 1.0
        np.testing.assert_array_equal(grads["bbox"], [1.0, 1.0])

    def test_non_finite_names_term(self):
        with pytest.raises(NonFiniteLossError, match="center"):
            total_loss({"kpt": result(1.0), "center": result(float("nan"))})

    def test_unknown_term(self):
        with pytest.raises(KeyError):
            total_loss({"heat": result(1.0)})


class TestGradientSweep:
    @pytest.mark.parametrize("seed", range(5))
    def test_ciou_random(self, seed):
        rng = np.random.default_rng(seed)
        target = rng.uniform(0.3, 3, 4)

        def fn(z):
            r = ciou_loss(z.reshape(4), target)
            return r.value, r.grad.reshape(z.shape)

        assert check_gradient(fn, rng.uniform(0.3, 3, 4), FDConfig()).passed
