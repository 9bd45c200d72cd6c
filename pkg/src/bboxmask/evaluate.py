"""OKS-based pose evaluation with COCO-style greedy matching and 101-point AP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import BBoxMaskError, Instance, KeypointSet, Scene, SceneValidationError, _require_keys

# COCO per-keypoint sigmas; the OKS constant is twice the sigma.
COCO_SIGMAS = np.array([0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89]) / 10.0
COCO_KAPPAS = tuple(2.0 * COCO_SIGMAS)
DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class KeypointCountError(BBoxMaskError, ValueError):
    pass


@dataclass(frozen=True)
class OksParams:
    kappas: tuple[float, ...] | None = None
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    default_kappa: float = 0.08

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", th)
        if not th or any(not 0 < t < 1 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be strictly increasing inside (0, 1)")
        if self.kappas is not None:
            object.__setattr__(self, "kappas", tuple(float(k) for k in self.kappas))
            if any(k <= 0 for k in self.kappas):
                raise ValueError("kappas must be > 0")
        if self.default_kappa <= 0:
            raise ValueError("default_kappa must be > 0")

    @classmethod
    def coco(cls, **kw) -> "OksParams":
        return cls(kappas=COCO_KAPPAS, **kw)

    def kappa_array(self, k: int) -> np.ndarray:
        if self.kappas is None:
            return np.full(k, self.default_kappa)
        if len(self.kappas) != k:
            raise KeypointCountError(f"{len(self.kappas)} kappas for {k} keypoints")
        return np.asarray(self.kappas)


@dataclass(frozen=True)
class Prediction:
    keypoints: KeypointSet
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("prediction score must be finite")


def oks(pred: KeypointSet, gt: Instance, params: OksParams = OksParams()) -> float:
    """Object keypoint similarity with the gt box area as the squared scale.

    Only gt keypoints with visibility > 0 count; a gt with none scores 0.
    """
    k = len(gt.keypoints)
    if len(pred) != k:
        raise KeypointCountError(f"prediction has {len(pred)} keypoints, gt has {k}")
    labeled = gt.keypoints.visibility > 0
    if not labeled.any():
        return 0.0
    d2 = ((pred.xy - gt.keypoints.xy) ** 2).sum(axis=1)
    kappa = params.kappa_array(k)
    e = np.exp(-d2 / (2.0 * gt.box.area * kappa**2))
    return float(e[labeled].mean())


def oks_matrix(preds: list[Prediction], scene: Scene, params: OksParams = OksParams()) -> np.ndarray:
    return np.array([[oks(p.keypoints, g, params) for g in scene.instances] for p in preds]).reshape(len(preds), len(scene))


def greedy_match(ious: np.ndarray, order: np.ndarray, threshold: float, valid_gt: np.ndarray) -> np.ndarray:
    """Match predictions (visited in ``order``) to the best free gt with OKS >= threshold.

    Returns ``match[pred]`` = gt index or -1.
    """
    n_pred, n_gt = ious.shape
    match = np.full(n_pred, -1)
    taken = np.zeros(n_gt, dtype=bool)
    for p in order:
        best, best_val = -1, -np.inf
        for g in range(n_gt):
            if taken[g] or not valid_gt[g]:
                continue
            if ious[p, g] >= threshold and ious[p, g] > best_val:
                best, best_val = g, ious[p, g]
        if best >= 0:
            taken[best] = True
            match[p] = best
    return match


def interpolated_precision(tp_sorted: np.ndarray, n_gt: int) -> tuple[np.ndarray, float]:
    """COCO 101-point precision curve and final recall for score-sorted TP flags."""
    if n_gt == 0 or tp_sorted.size == 0:
        return np.zeros(RECALL_POINTS.size), 0.0
    tp = np.cumsum(tp_sorted)
    fp = np.cumsum(~tp_sorted)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    curve = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return curve, float(recall[-1])


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    ap: float
    ar: float
    per_threshold: list[dict] = field(default_factory=list)
    # Per image and threshold, match[pred] = gt index or -1; not serialized.
    matches: list[list[np.ndarray]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "ap": self.ap,
            "ar": self.ar,
            "per_threshold": [
                {"t": row["t"], "precision_curve": list(row["precision_curve"]), "recall": row["recall"], "ap_t": row["ap_t"]}
                for row in self.per_threshold
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def evaluate(images: list[tuple[list[Prediction], Scene]], params: OksParams = OksParams()) -> EvalReport:
    """Pool detections over images and score them at every OKS threshold.

    Ground truths without labeled keypoints can't be matched and don't count
    toward recall. With no countable ground truth, AP and AR are 0.
    """
    per_image = []
    for preds, scene in images:
        ious = oks_matrix(preds, scene, params)
        scores = np.array([p.score for p in preds], dtype=float)
        order = np.argsort(-scores, kind="stable")
        valid = np.array([bool((g.keypoints.visibility > 0).any()) for g in scene.instances], dtype=bool)
        per_image.append((ious, scores, order, valid))
    n_gt = int(sum(v.sum() for *_, v in per_image))
    all_scores = np.concatenate([s for _, s, _, _ in per_image]) if per_image else np.zeros(0)
    pooled_order = np.argsort(-all_scores, kind="stable")

    rows, matches = [], [[] for _ in per_image]
    for t in params.thresholds:
        flags = []
        for k, (ious, _, order, valid) in enumerate(per_image):
            m = greedy_match(ious, order, t, valid)
            matches[k].append(m)
            flags.append(m >= 0)
        tp = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
        curve, recall = interpolated_precision(tp[pooled_order], n_gt)
        rows.append({"t": float(t), "precision_curve": [float(v) for v in curve], "recall": recall, "ap_t": float(curve.mean())})
    ap = float(np.mean([r["ap_t"] for r in rows]))
    ar = float(np.mean([r["recall"] for r in rows]))
    return EvalReport(params.thresholds, ap, ar, rows, matches)


def match_and_score(preds: list[Prediction], scene: Scene, params: OksParams = OksParams()) -> EvalReport:
    return evaluate([(preds, scene)], params)


def predictions_from_scene(scene: Scene, score: float = 1.0) -> list[Prediction]:
    return [Prediction(inst.keypoints, score) for inst in scene.instances]


def predictions_to_dict(preds: list[Prediction], width: int, height: int) -> dict:
    k = len(preds[0].keypoints) if preds else 0
    out = []
    for n, p in enumerate(preds):
        entry = {
            "id": n + 1,
            "score": float(p.score),
            "keypoints": [[float(x), float(y), int(v)] for x, y, v in p.keypoints.points],
        }
        if p.keypoints.scores is not None:
            entry["keypoint_scores"] = [float(s) for s in p.keypoints.scores]
        out.append(entry)
    return {"width": width, "height": height, "keypoint_count": k, "instances": out}


def predictions_from_dict(obj: dict) -> list[Prediction]:
    """Parse the prediction file: the scene layout with ``score`` per instance.

    ``box``, ``center`` and ``keypoint_scores`` are optional.
    """
    _require_keys(obj, {"width", "height", "keypoint_count", "instances"}, "predictions")
    k = int(obj["keypoint_count"])
    preds = []
    allowed = {"id", "score", "keypoints", "box", "center", "keypoint_scores"}
    for n, raw in enumerate(obj["instances"]):
        if not isinstance(raw, dict):
            raise SceneValidationError(f"instances[{n}]: expected an object")
        if set(raw) - allowed:
            raise SceneValidationError(f"instances[{n}]: unknown field(s) {sorted(set(raw) - allowed)}")
        if "score" not in raw or "keypoints" not in raw:
            raise SceneValidationError(f"instances[{n}]: 'score' and 'keypoints' are required")
        pts = np.asarray(raw["keypoints"], dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] != k:
            raise KeypointCountError(f"instances[{n}]: {pts.shape[0]} keypoints, expected {k}")
        preds.append(Prediction(KeypointSet(pts, raw.get("keypoint_scores")), float(raw["score"])))
    return preds
