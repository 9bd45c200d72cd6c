"""Gradient descent on an embedding map under the box-supervised loss.

No network is involved: the map itself is the parameter, which isolates how
the loss shapes the embedding space.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .aux_losses import NonFiniteLossError
from .core import BBoxMaskError, Grid, Scene
from .embedding import (
    EmbeddingBatch,
    EmbParams,
    LossForm,
    _metric,
    _outside_mean,
    _SoftMean,
    embedding_loss,
    normalize_embeddings,
    similarity_full,
)
from .synth import SplitMix64

CSV_HEADER = ("step", "total", "pull_in", "push_out", "push_inst", "pair_sim", "coherence", "bg_sep")


class OptimizationError(BBoxMaskError, RuntimeError):
    pass


@dataclass(frozen=True)
class RandomInit:
    seed: int = 0
    scale: float = 0.1


@dataclass(frozen=True)
class ConstantInit:
    value: float = 1.0


@dataclass(frozen=True)
class OptConfig:
    steps: int = 500
    lr: float = 0.5
    init: RandomInit | ConstantInit = field(default_factory=RandomInit)
    emb_params: EmbParams = field(default_factory=lambda: EmbParams(dim=8))
    log_every: int = 1
    renormalize: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass
class TrajectoryLog:
    rows: list[tuple] = field(default_factory=list)

    def append(self, row: tuple) -> None:
        if self.rows and row[0] <= self.rows[-1][0]:
            raise ValueError("trajectory steps must increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        k = CSV_HEADER.index(name)
        return np.array([r[k] for r in self.rows])

    @property
    def first(self) -> dict:
        return dict(zip(CSV_HEADER, self.rows[0]))

    @property
    def last(self) -> dict:
        return dict(zip(CSV_HEADER, self.rows[-1]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in self.rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            fh.write(self.to_csv())
        os.replace(tmp, path)

    @classmethod
    def read_csv(cls, path) -> "TrajectoryLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            log = cls()
            for row in reader:
                log.append((int(row[0]),) + tuple(float(v) for v in row[1:]))
        return log


def initial_map(scene: Scene, dim: int, init: RandomInit | ConstantInit) -> np.ndarray:
    shape = (dim, scene.height, scene.width)
    if isinstance(init, ConstantInit):
        return np.full(shape, float(init.value))
    rng = SplitMix64(init.seed)
    vals = [rng.uniform(-init.scale, init.scale) for _ in range(dim * scene.height * scene.width)]
    return np.array(vals).reshape(shape)


def diagnostics(batch: EmbeddingBatch, params: EmbParams) -> tuple[float, float, float]:
    """Mean pairwise similarity, mean in-box coherence and mean background distance."""
    n = batch.n
    pair = []
    for i in range(n):
        for j in range(i + 1, n):
            d = _metric(batch.p[i], batch.p[j], params.metric, params.epsilon)[0]
            pair.append(math.exp(-params.beta * d))
    coherence = [float(_metric(batch.p[i], _SoftMean(batch, i, params).mean, params.metric, params.epsilon)[0]) for i in range(n)]
    bg = []
    for i in range(n):
        m = _outside_mean(batch, i)
        if m is not None:
            bg.append(float(_metric(batch.p[i], m, params.metric, params.epsilon)[0]))
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    return mean(pair), mean(coherence), mean(bg)


def _row(step: int, batch: EmbeddingBatch, result, params: EmbParams) -> tuple:
    parts = result.parts
    return (
        step,
        result.value,
        parts.get("pull_in", 0.0),
        parts.get("push_out", 0.0),
        parts.get("push_inst", 0.0),
        *diagnostics(batch, params),
    )


def optimize_embedding(scene: Scene, config: OptConfig = OptConfig(), e_init=None) -> tuple[np.ndarray, TrajectoryLog]:
    """Plain gradient descent ``e <- e - lr * grad``; returns the final normalized map and its log.

    With ``renormalize`` (default) the map is projected back to unit norm per
    pixel after every step. Otherwise the raw map is optimized and only the
    loss sees the normalized version.
    """
    params = config.emb_params
    e = initial_map(scene, params.dim, config.init) if e_init is None else np.array(e_init, dtype=np.float64)
    if config.renormalize:
        e = normalize_embeddings(e, params.epsilon)
    batch = EmbeddingBatch(e, scene, params.epsilon)
    log = TrajectoryLog()
    for step in range(config.steps + 1):
        result = embedding_loss(batch, params)
        if not math.isfinite(result.value) or not np.all(np.isfinite(result.grad)):
            raise OptimizationError(f"non-finite loss at step {step}")
        if step % config.log_every == 0 or step == config.steps:
            log.append(_row(step, batch, result, params))
        if step == config.steps:
            break
        e = batch.e_raw - config.lr * result.grad
        if config.renormalize:
            e = normalize_embeddings(e, params.epsilon)
        batch = batch.with_embeddings(e)
    return batch.e_norm, log


def similarity_snapshot(e_norm, scene: Scene, instance_id: int, params: EmbParams) -> Grid:
    """Similarity of every pixel to the embedding at one instance's center."""
    try:
        inst = scene.instance(instance_id)
    except KeyError as exc:
        raise BBoxMaskError(str(exc)) from None
    e = np.asarray(e_norm, dtype=np.float64)
    cx, cy = inst.center_pixel
    return Grid(similarity_full(e, e[:, cy, cx], params)[None])


__all__ = [
    "CSV_HEADER",
    "ConstantInit",
    "LossForm",
    "NonFiniteLossError",
    "OptConfig",
    "OptimizationError",
    "RandomInit",
    "TrajectoryLog",
    "diagnostics",
    "initial_map",
    "optimize_embedding",
    "similarity_snapshot",
]
