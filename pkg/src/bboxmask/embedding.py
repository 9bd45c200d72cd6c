"""Box-supervised instance embedding losses.

The embedding map ``e`` of shape ``(D, H, W)`` is L2-normalized per pixel and
instance embeddings ``p_i`` are read at each instance's center pixel. Three
terms are combined:

* in-box pull: ``d(p_i, pbar_i)`` where ``pbar_i`` is the mean of the in-box
  embeddings weighted by their similarity ``s = psi(d(e, p_i))`` to ``p_i``;
* out-box push: ``psi(d(p_i, pbar_c_i))`` against the plain mean of every
  pixel outside box ``i``;
* cross-instance push: ``psi(d(p_i, p_j))`` averaged over pairs.

``psi(d) = exp(-beta * d)``. With the default metric ``d`` is the mean
squared difference over the ``D`` channels.

Every loss returns its value together with the exact gradient with respect
to the *raw* (un-normalized) embedding map, differentiating through the
normalization, the center sampling and the soft weights ``s``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .core import BBox, BBoxMaskError, InvalidShapeError, Scene, box_mask


class DegenerateBoxError(BBoxMaskError, ValueError):
    pass


class OutOfBoundsError(BBoxMaskError, IndexError):
    pass


class Metric(str, enum.Enum):
    L2_MEAN_SQ = "l2"
    COSINE = "cosine"


class LossForm(str, enum.Enum):
    AE = "ae"
    CONTRASTIVE = "contrastive"


@dataclass(frozen=True)
class EmbParams:
    beta: float = 10.0
    dim: int = 32
    metric: Metric = Metric.L2_MEAN_SQ
    loss_form: LossForm = LossForm.AE
    epsilon: float = 1e-8
    temperature: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        object.__setattr__(self, "loss_form", LossForm(self.loss_form))
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray
    parts: dict[str, float] = field(default_factory=dict)

    def __add__(self, other: "LossResult") -> "LossResult":
        return LossResult(self.value + other.value, self.grad + other.grad, {**self.parts, **other.parts})


# --------------------------------------------------------------------------
# geometry and batches


@dataclass(frozen=True, eq=False)
class BoxGeometry:
    """Flat pixel indices for every instance: center, in-box set, complement."""

    height: int
    width: int
    centers: np.ndarray
    inside: tuple[np.ndarray, ...]
    outside: tuple[np.ndarray, ...]

    @classmethod
    def from_scene(cls, scene: Scene, height: int | None = None, width: int | None = None) -> "BoxGeometry":
        h = scene.height if height is None else height
        w = scene.width if width is None else width
        centers, inside, outside = [], [], []
        for inst in scene.instances:
            cx, cy = inst.center_pixel
            if not (0 <= cx < w and 0 <= cy < h):
                raise OutOfBoundsError(f"instance {inst.id}: center pixel {(cx, cy)} outside {w}x{h} grid")
            centers.append(cy * w + cx)
            m = box_mask(inst.box, w, h).ravel()
            inside.append(np.flatnonzero(m))
            outside.append(np.flatnonzero(~m))
        return cls(h, w, np.asarray(centers, dtype=np.intp), tuple(inside), tuple(outside))

    @property
    def n(self) -> int:
        return len(self.centers)


def normalize_embeddings(e_raw, epsilon: float = 1e-8) -> np.ndarray:
    """Divide each pixel's channel vector by ``max(||v||, epsilon)``."""
    e = np.asarray(e_raw, dtype=np.float64)
    norm = np.sqrt((e * e).sum(axis=0, keepdims=True))
    return e / np.maximum(norm, epsilon)


def _normalize_backward(e_raw: np.ndarray, e_norm: np.ndarray, g: np.ndarray, epsilon: float) -> np.ndarray:
    norm = np.sqrt((e_raw * e_raw).sum(axis=0, keepdims=True))
    active = norm > epsilon
    radial = (e_norm * g).sum(axis=0, keepdims=True)
    return np.where(active, (g - e_norm * radial) / np.where(active, norm, 1.0), g / epsilon)


class EmbeddingBatch:
    """A normalized embedding map bound to a scene's boxes.

    ``e_norm`` is ``(D, H, W)``; ``p`` is ``(N, D)`` with ``p[i]`` the
    normalized embedding at instance ``i``'s center pixel.
    """

    def __init__(self, e_raw, scene: Scene | None = None, epsilon: float = 1e-8, geometry: BoxGeometry | None = None):
        e_raw = np.asarray(e_raw, dtype=np.float64)
        if e_raw.ndim != 3:
            raise InvalidShapeError(f"embedding map must be (D, H, W), got {e_raw.shape}")
        if geometry is None:
            if scene is None:
                raise ValueError("need a scene or a precomputed geometry")
            geometry = BoxGeometry.from_scene(scene, e_raw.shape[1], e_raw.shape[2])
        if (geometry.height, geometry.width) != e_raw.shape[1:]:
            raise InvalidShapeError(f"geometry {geometry.height}x{geometry.width} does not match map {e_raw.shape}")
        self.e_raw = e_raw
        self.epsilon = epsilon
        self.geometry = geometry
        self.e_norm = normalize_embeddings(e_raw, epsilon)
        self.flat = self.e_norm.reshape(e_raw.shape[0], -1)
        self.p = self.flat[:, geometry.centers].T.copy()

    @property
    def dim(self) -> int:
        return self.e_raw.shape[0]

    @property
    def n(self) -> int:
        return self.geometry.n

    def with_embeddings(self, e_raw) -> "EmbeddingBatch":
        return EmbeddingBatch(e_raw, epsilon=self.epsilon, geometry=self.geometry)

    def raw_gradient(self, g_norm_flat: np.ndarray) -> np.ndarray:
        """Chain a gradient w.r.t. the flat normalized map back to ``e_raw``."""
        return _normalize_backward(self.e_raw, self.e_norm, g_norm_flat.reshape(self.e_raw.shape), self.epsilon)


def sample_instance_embeddings(e_norm, scene: Scene) -> np.ndarray:
    """Nearest-pixel sample of ``e_norm`` at every instance center, shape ``(N, D)``."""
    e = np.asarray(e_norm, dtype=np.float64)
    _, h, w = e.shape
    rows = []
    for inst in scene.instances:
        cx, cy = inst.center_pixel
        if not (0 <= cx < w and 0 <= cy < h):
            raise OutOfBoundsError(f"instance {inst.id}: center pixel {(cx, cy)} outside {w}x{h} grid")
        rows.append(e[:, cy, cx])
    return np.array(rows).reshape(len(rows), e.shape[0])


# --------------------------------------------------------------------------
# metrics: value plus partial derivatives w.r.t. both arguments


def _metric(u: np.ndarray, v: np.ndarray, metric: Metric, eps: float):
    """``d(u, v)`` along axis 0 with ``dd/du`` and ``dd/dv`` (broadcast shapes)."""
    if metric is Metric.L2_MEAN_SQ:
        diff = u - v
        dim = diff.shape[0]
        d = (diff * diff).sum(axis=0) / dim
        gu = 2.0 * diff / dim
        return d, gu, -gu
    nu = np.maximum(np.sqrt((u * u).sum(axis=0)), eps)
    nv = np.maximum(np.sqrt((v * v).sum(axis=0)), eps)
    cos = (u * v).sum(axis=0) / (nu * nv)
    gu = -(v / (nu * nv) - cos * u / (nu * nu))
    gv = -(u / (nu * nv) - cos * v / (nv * nv))
    return 1.0 - cos, gu, gv


def distance(u, v, metric: Metric | str = Metric.L2_MEAN_SQ, epsilon: float = 1e-8) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise InvalidShapeError(f"distance needs two equal-length vectors, got {u.shape} and {v.shape}")
    return float(_metric(u, v, Metric(metric), epsilon)[0])


def psi(d, beta: float):
    return np.exp(-beta * np.asarray(d))


def similarity_map(e_norm, p_i, box: BBox, params: EmbParams) -> np.ndarray:
    """``psi(d(e(x, y), p_i))`` on the pixels of ``box``, zero elsewhere."""
    e = np.asarray(e_norm, dtype=np.float64)
    mask = box_mask(box, e.shape[2], e.shape[1])
    if not mask.any():
        raise DegenerateBoxError(f"box {box.as_list()} covers no pixels")
    out = np.zeros(e.shape[1:])
    d = _metric(e[:, mask], np.asarray(p_i, dtype=np.float64)[:, None], params.metric, params.epsilon)[0]
    out[mask] = np.exp(-params.beta * d)
    return out


def similarity_full(e_norm, p_i, params: EmbParams) -> np.ndarray:
    e = np.asarray(e_norm, dtype=np.float64)
    d = _metric(e, np.asarray(p_i, dtype=np.float64)[:, None, None], params.metric, params.epsilon)[0]
    return np.exp(-params.beta * d)


# --------------------------------------------------------------------------
# building blocks shared by the AE and contrastive forms


def _check(batch: EmbeddingBatch, params: EmbParams) -> None:
    if batch.dim != params.dim:
        raise InvalidShapeError(f"embedding map has {batch.dim} channels but params.dim = {params.dim}")


class _SoftMean:
    """Similarity-weighted in-box mean ``pbar_i`` and its backward pass."""

    def __init__(self, batch: EmbeddingBatch, i: int, params: EmbParams):
        idx = batch.geometry.inside[i]
        if idx.size == 0:
            raise DegenerateBoxError(f"instance index {i}: box covers no pixels")
        self.idx = idx
        self.x = batch.flat[:, idx]
        self.p = batch.p[i]
        self.beta = params.beta
        d, self.gdu, self.gdv = _metric(self.x, self.p[:, None], params.metric, params.epsilon)
        self.s = np.exp(-params.beta * d)
        self.total = self.s.sum()
        self.mean = self.x @ self.s / self.total

    def backward(self, g_mean: np.ndarray, g_flat: np.ndarray) -> np.ndarray:
        """Accumulate into ``g_flat``; returns the extra gradient on ``p_i``."""
        g_s = g_mean @ (self.x - self.mean[:, None]) / self.total
        g_d = -self.beta * self.s * g_s
        g_flat[:, self.idx] += np.outer(g_mean, self.s / self.total) + self.gdu * g_d
        return self.gdv @ g_d


def _outside_mean(batch: EmbeddingBatch, i: int):
    out = batch.geometry.outside[i]
    if out.size == 0:
        return None
    return batch.flat[:, out].mean(axis=1)


def _outside_backward(batch: EmbeddingBatch, i: int, g_mean: np.ndarray, g_flat: np.ndarray) -> None:
    out = batch.geometry.outside[i]
    # Adding everywhere then removing the box is cheaper than indexing the complement.
    share = (g_mean / out.size)[:, None]
    g_flat += share
    g_flat[:, batch.geometry.inside[i]] -= share


# --------------------------------------------------------------------------
# loss terms


def _pull_in(batch: EmbeddingBatch, params: EmbParams, g: np.ndarray) -> float:
    n = batch.n
    if n < 1:
        raise DegenerateBoxError("pull_in needs at least one instance")
    value = 0.0
    centers = batch.geometry.centers
    for i in range(n):
        sm = _SoftMean(batch, i, params)
        d, gu, gv = _metric(sm.p, sm.mean, params.metric, params.epsilon)
        value += d / n
        g[:, centers[i]] += gu / n + sm.backward(gv / n, g)
    return float(value)


def _push_out(batch: EmbeddingBatch, params: EmbParams, g: np.ndarray) -> float:
    means = [_outside_mean(batch, i) for i in range(batch.n)]
    active = [i for i, m in enumerate(means) if m is not None]
    value = 0.0
    for i in active:
        d, gu, gv = _metric(batch.p[i], means[i], params.metric, params.epsilon)
        k = math.exp(-params.beta * d)
        value += k / len(active)
        g_d = -params.beta * k / len(active)
        g[:, batch.geometry.centers[i]] += g_d * gu
        _outside_backward(batch, i, g_d * gv, g)
    return value


def _push_inst(batch: EmbeddingBatch, params: EmbParams, g: np.ndarray) -> float:
    n = batch.n
    if n < 2:
        return 0.0
    value = 0.0
    weight = 2.0 / (n * (n - 1))
    centers = batch.geometry.centers
    for i in range(n):
        for j in range(i + 1, n):
            d, gu, gv = _metric(batch.p[i], batch.p[j], params.metric, params.epsilon)
            k = math.exp(-params.beta * d)
            value += weight * k
            g_d = -params.beta * k * weight
            g[:, centers[i]] += g_d * gu
            g[:, centers[j]] += g_d * gv
    return value


def _single(term, name: str, batch: EmbeddingBatch, params: EmbParams) -> LossResult:
    _check(batch, params)
    g = np.zeros_like(batch.flat)
    value = term(batch, params, g)
    return LossResult(float(value), batch.raw_gradient(g), {name: float(value)})


def pull_in(batch: EmbeddingBatch, params: EmbParams) -> LossResult:
    """Mean over instances of ``d(p_i, pbar_i)``."""
    return _single(_pull_in, "pull_in", batch, params)


def push_out(batch: EmbeddingBatch, params: EmbParams) -> LossResult:
    """Mean over instances of ``psi(d(p_i, pbar_c_i))``.

    Instances whose box covers the whole map have no background and are left
    out of the average.
    """
    return _single(_push_out, "push_out", batch, params)


def push_inst(batch: EmbeddingBatch, params: EmbParams) -> LossResult:
    """Mean over instance pairs of ``psi(d(p_i, p_j))``; zero for fewer than two instances."""
    return _single(_push_inst, "push_inst", batch, params)


def bbox_mask_loss(batch: EmbeddingBatch, params: EmbParams) -> LossResult:
    """Unweighted sum of :func:`pull_in`, :func:`push_out` and :func:`push_inst`.

    ``parts`` carries the three term values.
    """
    _check(batch, params)
    g = np.zeros_like(batch.flat)
    parts = {
        "pull_in": _pull_in(batch, params, g),
        "push_out": _push_out(batch, params, g),
        "push_inst": _push_inst(batch, params, g),
    }
    value = parts["pull_in"] + parts["push_out"] + parts["push_inst"]
    return LossResult(value, batch.raw_gradient(g), parts)


def contrastive_variant(batch: EmbeddingBatch, params: EmbParams) -> LossResult:
    """InfoNCE alternative to the AE terms.

    For instance ``i`` the positive is ``pbar_i`` and the negatives are every
    other ``p_j`` plus the background mean ``pbar_c_i``. Similarity is
    ``-d / temperature``.
    """
    _check(batch, params)
    n = batch.n
    if n < 1:
        raise DegenerateBoxError("contrastive loss needs at least one instance")
    tau = params.temperature
    centers = batch.geometry.centers
    g = np.zeros_like(batch.flat)
    value = 0.0
    for i in range(n):
        p = batch.p[i]
        sm = _SoftMean(batch, i, params)
        bg = _outside_mean(batch, i)
        others = [j for j in range(n) if j != i]
        targets = [sm.mean] + [batch.p[j] for j in others] + ([bg] if bg is not None else [])
        stacked = np.stack(targets, axis=1)  # (D, T)
        d, gu, gv = _metric(p[:, None], stacked, params.metric, params.epsilon)
        logits = -d / tau
        top = logits.max()
        w = np.exp(logits - top)
        lse = top + math.log(w.sum())
        value += (lse - logits[0]) / n
        g_logit = w / w.sum()
        g_logit[0] -= 1.0
        g_d = -g_logit / (tau * n)
        g_p = gu @ g_d
        g_targets = gv * g_d
        g_p += sm.backward(g_targets[:, 0], g)
        for col, j in enumerate(others, start=1):
            g[:, centers[j]] += g_targets[:, col]
        if bg is not None:
            _outside_backward(batch, i, g_targets[:, -1], g)
        g[:, centers[i]] += g_p
    return LossResult(float(value), batch.raw_gradient(g), {"contrastive": float(value)})


def embedding_loss(batch: EmbeddingBatch, params: EmbParams) -> LossResult:
    """Dispatch on ``params.loss_form``."""
    if params.loss_form is LossForm.CONTRASTIVE:
        return contrastive_variant(batch, params)
    return bbox_mask_loss(batch, params)
