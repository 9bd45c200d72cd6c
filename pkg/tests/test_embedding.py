import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bboxmask.core import BBox, Instance, KeypointSet, Scene
from bboxmask.embedding import (
    DegenerateBoxError,
    EmbeddingBatch,
    EmbParams,
    LossForm,
    Metric,
    OutOfBoundsError,
    bbox_mask_loss,
    contrastive_variant,
    distance,
    embedding_loss,
    normalize_embeddings,
    psi,
    pull_in,
    push_inst,
    push_out,
    sample_instance_embeddings,
    similarity_map,
)
from bboxmask.gradcheck import FDConfig, check_gradient, embedding_loss_fn, random_case


def make_scene(boxes, centers, width, height):
    insts = tuple(
        Instance(n + 1, BBox(*b), c, KeypointSet(np.zeros((0, 3)))) for n, (b, c) in enumerate(zip(boxes, centers))
    )
    return Scene(width, height, 0, insts)


def as_lists(e):
    return np.asarray(e).tolist()


def boxes_centers(scene):
    return (
        [(i.box.x_min, i.box.y_min, i.box.x_max, i.box.y_max) for i in scene.instances],
        [i.center for i in scene.instances],
    )


E2 = np.array([[[3.0, 1.0], [0.0, -1.0]], [[4.0, 1.0], [2.0, 0.5]]])
E3 = np.array(
    [
        [[1.0, 0.0, 0.5], [0.2, 1.0, -0.3], [0.0, 0.7, 1.0]],
        [[0.0, 1.0, 0.5], [0.9, 0.1, 0.4], [1.0, -0.2, 0.3]],
    ]
)
E4 = np.array([[[1.0, 0.6, 0.0]], [[0.0, 0.8, 1.0]]])


class TestNormalize:
    def test_three_four_five(self):
        e = np.array([[[3.0]], [[4.0]]])
        np.testing.assert_allclose(normalize_embeddings(e)[:, 0, 0], [0.6, 0.8])

    def test_zero_vector(self):
        e = np.zeros((3, 2, 2))
        np.testing.assert_array_equal(normalize_embeddings(e), e)

    def test_unit_norm(self):
        e = np.random.default_rng(0).normal(size=(5, 4, 3))
        norms = np.linalg.norm(normalize_embeddings(e), axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)


class TestSampling:
    def test_constant_field(self):
        e = normalize_embeddings(np.ones((4, 6, 6)))
        scene = make_scene([(0, 0, 3, 3), (2, 2, 6, 6)], [(1, 1), (4, 4)], 6, 6)
        p = sample_instance_embeddings(e, scene)
        np.testing.assert_array_equal(p[0], p[1])

    def test_rounding(self):
        e = np.arange(2 * 6 * 6, dtype=float).reshape(2, 6, 6)
        scene = make_scene([(0, 0, 6, 6)], [(2.4, 3.6)], 6, 6)
        np.testing.assert_array_equal(sample_instance_embeddings(e, scene)[0], e[:, 4, 2])

    def test_rows_are_columns(self):
        e = np.random.default_rng(1).normal(size=(3, 5, 5))
        scene = make_scene([(0, 0, 2, 2), (3, 3, 5, 5)], [(1, 0), (4, 3)], 5, 5)
        p = sample_instance_embeddings(e, scene)
        np.testing.assert_array_equal(p, np.stack([e[:, 0, 1], e[:, 3, 4]]))

    def test_center_off_grid(self):
        # The scene allows a 10x10 canvas; a 4x4 map cannot host the center.
        scene = make_scene([(0, 0, 10, 10)], [(7, 7)], 10, 10)
        with pytest.raises(OutOfBoundsError):
            EmbeddingBatch(np.ones((2, 4, 4)), scene)


class TestDistance:
    def test_identity(self):
        assert distance([0.3, -0.2], [0.3, -0.2]) == 0.0

    def test_orthogonal_l2(self):
        assert distance([1.0, 0.0], [0.0, 1.0], Metric.L2_MEAN_SQ) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal_cosine(self):
        assert distance([1.0, 0.0], [0.0, 1.0], "cosine") == pytest.approx(1.0, abs=1e-15)

    @given(
        st.lists(st.floats(-1, 1), min_size=3, max_size=3),
        st.lists(st.floats(-1, 1), min_size=3, max_size=3),
    )
    def test_symmetric_and_bounded(self, u, v):
        un = normalize_embeddings(np.array(u)[:, None, None])[:, 0, 0]
        vn = normalize_embeddings(np.array(v)[:, None, None])[:, 0, 0]
        for metric in Metric:
            d = distance(un, vn, metric)
            assert d == pytest.approx(distance(vn, un, metric), abs=1e-15)
            assert -1e-12 <= d <= 4.0 / 3 + 1e-12 if metric is Metric.L2_MEAN_SQ else -1e-12 <= d <= 2 + 1e-12


class TestSimilarity:
    def test_kernel_values(self):
        assert psi(1.0, 10.0) == pytest.approx(4.5399929762484854e-05, rel=1e-14)
        assert psi(0.5, 1.0) == pytest.approx(0.6065306597126334, rel=1e-14)

    def test_self_similarity(self):
        e = normalize_embeddings(np.random.default_rng(2).normal(size=(4, 5, 5)))
        box = BBox(1, 1, 4, 4)
        s = similarity_map(e, e[:, 2, 3], box, EmbParams(dim=4))
        assert s[2, 3] == 1.0
        assert np.all(s[1:4, 1:4] > 0) and np.all(s <= 1.0)
        assert s[0].sum() == 0.0 and s[:, 0].sum() == 0.0


class TestPullIn:
    def test_hand_example(self):
        scene = make_scene([(0, 0, 2, 2)], [(0, 0)], 2, 2)
        res = pull_in(EmbeddingBatch(E2, scene), EmbParams(dim=2))
        assert res.value == pytest.approx(0.00041917200064318927, rel=1e-12)
        assert res.value == pytest.approx(oracles.emb_terms(as_lists(E2), [(0, 0, 2, 2)], [(0, 0)])[0], rel=1e-12)

    def test_constant_box_is_zero(self):
        e = np.random.default_rng(3).normal(size=(3, 6, 6))
        e[:, 1:4, 1:4] = np.array([0.2, -1.0, 0.5])[:, None, None]
        scene = make_scene([(1, 1, 4, 4)], [(2, 2)], 6, 6)
        res = pull_in(EmbeddingBatch(e, scene), EmbParams(dim=3))
        assert res.value == pytest.approx(0.0, abs=1e-15)

    def test_empty_box(self):
        # A box that covers no pixel center after rasterization.
        scene = make_scene([(1.2, 1.2, 1.4, 1.4)], [(1.3, 1.3)], 4, 4)
        with pytest.raises(DegenerateBoxError):
            pull_in(EmbeddingBatch(np.ones((2, 4, 4)), scene), EmbParams(dim=2))

    def test_dim_mismatch(self):
        scene = make_scene([(0, 0, 2, 2)], [(0, 0)], 2, 2)
        with pytest.raises(ValueError):
            pull_in(EmbeddingBatch(E2, scene), EmbParams(dim=4))


class TestPushOut:
    def test_hand_example(self):
        scene = make_scene([(1, 1, 2, 2)], [(1, 1)], 3, 3)
        res = push_out(EmbeddingBatch(E3, scene), EmbParams(dim=2))
        assert res.value == pytest.approx(0.06034422339355558, rel=1e-12)

    def test_center_equals_background(self):
        e = np.ones((2, 3, 3))
        e[:, 1, 1] = 5.0  # normalizes to the same direction
        scene = make_scene([(1, 1, 2, 2)], [(1, 1)], 3, 3)
        assert push_out(EmbeddingBatch(e, scene), EmbParams(dim=2)).value == pytest.approx(1.0, abs=1e-15)

    def test_full_image_box(self):
        scene = make_scene([(0, 0, 3, 3)], [(1, 1)], 3, 3)
        res = push_out(EmbeddingBatch(E3, scene), EmbParams(dim=2))
        assert res.value == 0.0
        assert not res.grad.any()

    def test_excluded_instances_renormalize(self):
        # The full-image box contributes nothing, so the mean is over one instance.
        scene = make_scene([(1, 1, 2, 2), (0, 0, 3, 3)], [(1, 1), (0, 0)], 3, 3)
        params = EmbParams(dim=2)
        both = push_out(EmbeddingBatch(E3, scene), params).value
        assert both == pytest.approx(0.06034422339355558, rel=1e-12)


class TestPushInst:
    def test_hand_example(self):
        scene = make_scene([(0, 0, 1, 1), (1, 0, 2, 1), (2, 0, 3, 1)], [(0, 0), (1, 0), (2, 0)], 3, 1)
        res = push_inst(EmbeddingBatch(E4, scene), EmbParams(dim=2))
        assert res.value == pytest.approx(0.05123210735170313, rel=1e-12)

    def test_single_instance(self):
        scene = make_scene([(1, 1, 2, 2)], [(1, 1)], 3, 3)
        res = push_inst(EmbeddingBatch(E3, scene), EmbParams(dim=2))
        assert res.value == 0.0
        assert not res.grad.any()

    def test_identical_embeddings(self):
        scene = make_scene([(0, 0, 2, 2), (2, 2, 4, 4), (0, 2, 2, 4)], [(0, 0), (3, 3), (1, 3)], 4, 4)
        res = push_inst(EmbeddingBatch(np.ones((3, 4, 4)), scene), EmbParams(dim=3))
        assert res.value == pytest.approx(1.0, abs=1e-15)


class TestBboxMaskLoss:
    def test_sum_of_parts(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            scene, e = random_case(rng)
            batch = EmbeddingBatch(e, scene)
            params = EmbParams(dim=e.shape[0])
            total = bbox_mask_loss(batch, params)
            parts = [f(batch, params) for f in (pull_in, push_out, push_inst)]
            assert total.value == pytest.approx(sum(p.value for p in parts), abs=1e-14)
            np.testing.assert_allclose(total.grad, sum(p.grad for p in parts), atol=1e-13)
            assert set(total.parts) == {"pull_in", "push_out", "push_inst"}

    def test_single_instance_push_gradient(self):
        scene = make_scene([(1, 1, 4, 4)], [(2, 2)], 6, 6)
        e = np.random.default_rng(5).normal(size=(4, 6, 6))
        params = EmbParams(dim=4)
        res = bbox_mask_loss(EmbeddingBatch(e, scene), params)
        out = push_out(EmbeddingBatch(e, scene), params)
        assert res.parts["push_inst"] == 0.0
        assert np.abs(out.grad).max() > 1e-6
        report = check_gradient(embedding_loss_fn(push_out, scene, e, params), e, FDConfig())
        assert report.passed

    def test_dispatch(self):
        scene = make_scene([(0, 0, 2, 2)], [(0, 0)], 3, 3)
        e = np.random.default_rng(6).normal(size=(2, 3, 3))
        batch = EmbeddingBatch(e, scene)
        ae = embedding_loss(batch, EmbParams(dim=2))
        con = embedding_loss(batch, EmbParams(dim=2, loss_form=LossForm.CONTRASTIVE))
        assert ae.value == bbox_mask_loss(batch, EmbParams(dim=2)).value
        assert con.value == contrastive_variant(batch, EmbParams(dim=2)).value


class TestContrastive:
    def test_single_instance_below_log2(self):
        # Whole box constant so pbar equals p; background points the other way.
        e = np.zeros((2, 4, 4))
        e[0] = -1.0
        e[0, 1:3, 1:3] = 1.0
        scene = make_scene([(1, 1, 3, 3)], [(1, 1)], 4, 4)
        params = EmbParams(dim=2, loss_form="contrastive")
        res = contrastive_variant(EmbeddingBatch(e, scene), params)
        d_bg = 2.0  # (1 - (-1))^2 / 2
        expected = -math.log(1.0 / (1.0 + math.exp(-d_bg / params.temperature)))
        assert res.value == pytest.approx(expected, rel=1e-12)
        assert res.value < math.log(2)

    def test_large_temperature_is_uniform(self):
        scene = make_scene([(0, 0, 2, 2), (2, 2, 4, 4)], [(0, 0), (3, 3)], 4, 4)
        e = np.random.default_rng(7).normal(size=(3, 4, 4))
        params = EmbParams(dim=3, temperature=1e9)
        # Positive, the other instance, and the background: three terms.
        assert contrastive_variant(EmbeddingBatch(e, scene), params).value == pytest.approx(math.log(3), rel=1e-8)

    @pytest.mark.parametrize("metric", ["l2", "cosine"])
    def test_oracle(self, metric):
        rng = np.random.default_rng(8)
        for _ in range(5):
            scene, e = random_case(rng)
            params = EmbParams(dim=e.shape[0], metric=metric)
            got = contrastive_variant(EmbeddingBatch(e, scene), params).value
            want = oracles.contrastive(as_lists(e), *boxes_centers(scene), metric=metric)
            assert got == pytest.approx(want, abs=1e-10)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["l2", "cosine"]))
    def test_oracle_equivalence(self, seed, metric):
        scene, e = random_case(np.random.default_rng(seed))
        params = EmbParams(dim=e.shape[0], metric=metric)
        batch = EmbeddingBatch(e, scene)
        want = oracles.emb_terms(as_lists(e), *boxes_centers(scene), metric=metric)
        got = [f(batch, params).value for f in (pull_in, push_out, push_inst)]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scene, e = random_case(rng, counts=(2, 3))
        perm = rng.permutation(len(scene))
        insts = tuple(
            Instance(k + 1, scene.instances[j].box, scene.instances[j].center, scene.instances[j].keypoints)
            for k, j in enumerate(perm)
        )
        shuffled = Scene(scene.width, scene.height, 0, insts)
        params = EmbParams(dim=e.shape[0])
        a = bbox_mask_loss(EmbeddingBatch(e, scene), params)
        b = bbox_mask_loss(EmbeddingBatch(e, shuffled), params)
        for key in a.parts:
            assert a.parts[key] == pytest.approx(b.parts[key], abs=1e-13)
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 3), st.integers(0, 3))
    def test_translation_equivariance(self, seed, tx, ty):
        rng = np.random.default_rng(seed)
        scene, e = random_case(rng, sizes=(6,))
        # Noise around the original 6x6 map so the background matters.
        base = rng.normal(size=(e.shape[0], 9, 9))
        base[:, :6, :6] = e
        moved = np.roll(np.roll(base, ty, axis=1), tx, axis=2)
        insts = []
        for inst in scene.instances:
            b = inst.box
            insts.append(
                Instance(
                    inst.id,
                    BBox(b.x_min + tx, b.y_min + ty, b.x_max + tx, b.y_max + ty),
                    (inst.center[0] + tx, inst.center[1] + ty),
                    inst.keypoints,
                )
            )
        s0 = Scene(9, 9, 0, scene.instances)
        s1 = Scene(9, 9, 0, tuple(insts))
        # Wrap-around from np.roll only permutes background pixels, which
        # leaves every term unchanged.
        for form in LossForm:
            p = EmbParams(dim=e.shape[0], loss_form=form)
            a = embedding_loss(EmbeddingBatch(base, s0), p).value
            b = embedding_loss(EmbeddingBatch(moved, s1), p).value
            assert a == pytest.approx(b, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["l2", "cosine"]))
    def test_bounds(self, seed, metric):
        scene, e = random_case(np.random.default_rng(seed))
        params = EmbParams(dim=e.shape[0], metric=metric)
        res = bbox_mask_loss(EmbeddingBatch(e, scene), params)
        assert res.parts["pull_in"] >= 0
        assert 0 <= res.parts["push_out"] <= 1
        assert 0 <= res.parts["push_inst"] <= 1
        assert res.grad.shape == e.shape
