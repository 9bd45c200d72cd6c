"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .aux_losses import FocalParams, ciou_loss, heatmap_focal_loss
from .core import BBox, Instance, KeypointSet, Scene
from .embedding import (
    EmbeddingBatch,
    EmbParams,
    LossForm,
    Metric,
    bbox_mask_loss,
    contrastive_variant,
    pull_in,
    push_inst,
    push_out,
)

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class FDConfig:
    step: float = 1e-5
    rel_tol: float = 1e-5
    abs_tol: float = 1e-8
    trials: int = 100
    seed: int = 0
    full_sweep_limit: int = 4096
    subset_size: int = 200

    def __post_init__(self):
        if self.step <= 0 or self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("step and tolerances must be > 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class FDReport:
    op: str
    max_rel_err: float = 0.0
    max_abs_err: float = 0.0
    checked: int = 0
    failed: list[dict] = field(default_factory=list)
    passed: bool = True

    def merge(self, other: "FDReport") -> None:
        self.max_rel_err = max(self.max_rel_err, other.max_rel_err)
        self.max_abs_err = max(self.max_abs_err, other.max_abs_err)
        self.checked += other.checked
        self.failed.extend(other.failed)
        self.passed = self.passed and other.passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def probe_indices(size: int, config: FDConfig) -> np.ndarray:
    if size <= config.full_sweep_limit:
        return np.arange(size)
    rng = np.random.default_rng(config.seed)
    return np.sort(rng.choice(size, size=min(config.subset_size, size), replace=False))


def check_gradient(loss_fn: LossFn, x, config: FDConfig = FDConfig(), op: str = "loss") -> FDReport:
    """Compare ``loss_fn``'s gradient at ``x`` with central differences.

    A coordinate passes when its absolute error is within ``abs_tol`` or its
    relative error ``|a - fd| / max(|a|, |fd|, abs_tol)`` is within
    ``rel_tol``.
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = loss_fn(x)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    report = FDReport(op)
    h = config.step
    for k in probe_indices(flat.size, config):
        orig = flat[k]
        flat[k] = orig + h
        up = loss_fn(x)[0]
        flat[k] = orig - h
        down = loss_fn(x)[0]
        flat[k] = orig
        report.checked += 1
        if not (math.isfinite(up) and math.isfinite(down)):
            report.failed.append({"index": int(k), "analytic": float(analytic[k]), "fd": None})
            report.passed = False
            continue
        fd = (up - down) / (2 * h)
        a = analytic[k]
        abs_err = abs(a - fd)
        rel_err = abs_err / max(abs(a), abs(fd), config.abs_tol)
        report.max_abs_err = max(report.max_abs_err, abs_err)
        report.max_rel_err = max(report.max_rel_err, rel_err)
        if abs_err > config.abs_tol and rel_err > config.rel_tol:
            report.failed.append({"index": int(k), "analytic": float(a), "fd": float(fd)})
            report.passed = False
    return report


# --------------------------------------------------------------------------
# randomized suite over the loss operations


def random_scene(rng: np.random.Generator, size: int, n: int) -> Scene:
    """Small scene with ``n`` random integer boxes; centers at box centers."""
    instances = []
    for i in range(n):
        w, h = rng.integers(1, size, endpoint=True, size=2)
        x0 = int(rng.integers(0, size - w, endpoint=True))
        y0 = int(rng.integers(0, size - h, endpoint=True))
        box = BBox(x0, y0, x0 + int(w), y0 + int(h))
        cx = float(rng.integers(x0, x0 + w))
        cy = float(rng.integers(y0, y0 + h))
        instances.append(Instance(i + 1, box, (cx, cy), KeypointSet(np.zeros((0, 3)))))
    return Scene(size, size, 0, tuple(instances))


def random_case(rng: np.random.Generator, dims=(2, 4, 8), sizes=(6, 8), counts=(1, 2, 3)):
    d = int(rng.choice(dims))
    size = int(rng.choice(sizes))
    n = int(rng.choice(counts))
    scene = random_scene(rng, size, n)
    e_raw = rng.normal(size=(d, size, size))
    return scene, e_raw


EMBEDDING_OPS = {
    "pull_in": pull_in,
    "push_out": push_out,
    "push_inst": push_inst,
    "bbox_mask_loss": bbox_mask_loss,
    "contrastive_variant": contrastive_variant,
}


def embedding_loss_fn(op, scene: Scene, e_raw: np.ndarray, params: EmbParams) -> LossFn:
    batch = EmbeddingBatch(e_raw, scene, params.epsilon)

    def fn(x):
        res = op(batch.with_embeddings(x), params)
        return res.value, res.grad

    return fn


def _ciou_case(rng: np.random.Generator):
    pred = rng.uniform(0.5, 4.0, size=4)
    target = rng.uniform(0.5, 4.0, size=4)

    def fn(x):
        res = ciou_loss(x.reshape(4), target)
        return res.value, res.grad.reshape(x.shape)

    return fn, pred.reshape(4, 1, 1)


def _focal_case(rng: np.random.Generator, size: int):
    target = rng.uniform(0, 1, size=(1, size, size)) ** 2
    target[0, rng.integers(size), rng.integers(size)] = 1.0
    pred = rng.uniform(0.05, 0.95, size=target.shape)
    params = FocalParams()

    def fn(x):
        res = heatmap_focal_loss(x, target, params)
        return res.value, res.grad

    return fn, pred


def gradient_suite(
    config: FDConfig = FDConfig(),
    beta: float = 10.0,
    metric: Metric | str = Metric.L2_MEAN_SQ,
    ops: tuple[str, ...] | None = None,
) -> dict[str, FDReport]:
    """Run ``config.trials`` seeded FD checks per operation.

    Each trial draws ``D`` in {2, 4, 8}, ``H = W`` in {6, 8} and ``N`` in
    {1, 2, 3}. Returns one merged report per operation.
    """
    names = ops or (*EMBEDDING_OPS, "heatmap_focal_loss", "ciou_loss")
    reports = {}
    for name in names:
        rng = np.random.default_rng([config.seed, len(name), sum(map(ord, name))])
        merged = FDReport(name)
        for _ in range(config.trials):
            if name in EMBEDDING_OPS:
                scene, e_raw = random_case(rng)
                form = LossForm.CONTRASTIVE if name == "contrastive_variant" else LossForm.AE
                params = EmbParams(beta=beta, dim=e_raw.shape[0], metric=metric, loss_form=form)
                fn, x = embedding_loss_fn(EMBEDDING_OPS[name], scene, e_raw, params), e_raw
            elif name == "ciou_loss":
                fn, x = _ciou_case(rng)
            elif name == "heatmap_focal_loss":
                fn, x = _focal_case(rng, int(rng.choice((6, 8))))
            else:
                raise KeyError(f"unknown op {name!r}")
            merged.merge(check_gradient(fn, x, config, name))
        reports[name] = merged
    return reports
