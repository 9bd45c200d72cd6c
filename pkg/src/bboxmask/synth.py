"""Deterministic synthetic crowded scenes.

Randomness comes from SplitMix64 (Steele, Lea & Flood 2014) so that a seed
produces the same scene on any platform or language:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

all arithmetic modulo 2**64. Uniform doubles take the top 53 bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BBox, BBoxMaskError, Instance, KeypointSet, Scene, box_iou

_MASK64 = (1 << 64) - 1


class GenerationFailedError(BBoxMaskError, RuntimeError):
    pass


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in ``[lo, hi]`` inclusive."""
        return lo + int(self.uniform() * (hi - lo + 1))

    def normal(self) -> float:
        # Box-Muller, one draw per call; 1 - u keeps log away from zero.
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_instances: int = 2
    overlap: float = 0.0
    width: int = 64
    height: int = 64
    keypoint_count: int = 5
    body_sigma: float = 3.0
    min_box_frac: float = 0.2
    max_box_frac: float = 0.45
    min_center_spacing: float = 0.0
    max_retries: int = 1000

    def __post_init__(self):
        if self.num_instances < 1:
            raise ValueError("num_instances must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if self.width < 4 or self.height < 4:
            raise ValueError("scene must be at least 4x4")
        if self.keypoint_count < 0 or self.body_sigma <= 0:
            raise ValueError("keypoint_count >= 0 and body_sigma > 0 required")
        if not 0 < self.min_box_frac <= self.max_box_frac <= 1:
            raise ValueError("need 0 < min_box_frac <= max_box_frac <= 1")


def _random_box(rng: SplitMix64, cfg: SynthConfig) -> BBox:
    w = rng.randint(max(2, int(cfg.min_box_frac * cfg.width)), max(2, int(cfg.max_box_frac * cfg.width)))
    h = rng.randint(max(2, int(cfg.min_box_frac * cfg.height)), max(2, int(cfg.max_box_frac * cfg.height)))
    x0 = rng.randint(0, cfg.width - w)
    y0 = rng.randint(0, cfg.height - h)
    return BBox(x0, y0, x0 + w, y0 + h)


def _overlapping_box(rng: SplitMix64, ref: BBox, cfg: SynthConfig) -> BBox:
    # Shift and rescale the reference box by an amount that shrinks as the target overlap grows.
    slack = 1.0 - cfg.overlap
    w = max(2, int(round(ref.width * rng.uniform(1 - 0.3 * slack, 1 + 0.3 * slack))))
    h = max(2, int(round(ref.height * rng.uniform(1 - 0.3 * slack, 1 + 0.3 * slack))))
    dx = int(round(rng.uniform(-1, 1) * slack * ref.width * 0.5))
    dy = int(round(rng.uniform(-1, 1) * slack * ref.height * 0.5))
    x0 = min(max(int(ref.x_min) + dx, 0), cfg.width - w)
    y0 = min(max(int(ref.y_min) + dy, 0), cfg.height - h)
    return BBox(x0, y0, x0 + w, y0 + h)


def _center(box: BBox) -> tuple[float, float]:
    return (box.x_min + box.x_max) / 2.0, (box.y_min + box.y_max) / 2.0


def _keypoints(rng: SplitMix64, box: BBox, cfg: SynthConfig) -> KeypointSet:
    cx, cy = _center(box)
    # Visible keypoints must be inside the image (x <= width-1), and inside the box.
    hi_x = min(box.x_max, cfg.width - 1)
    hi_y = min(box.y_max, cfg.height - 1)
    pts = []
    for _ in range(cfg.keypoint_count):
        x = min(max(cx + cfg.body_sigma * rng.normal(), box.x_min), hi_x)
        y = min(max(cy + cfg.body_sigma * rng.normal(), box.y_min), hi_y)
        u = rng.uniform()
        vis = 2 if u < 0.8 else (1 if u < 0.9 else 0)
        pts.append((x, y, vis))
    return KeypointSet(np.array(pts, dtype=np.float64).reshape(-1, 3))


def _spaced(boxes: list[BBox], cand: BBox, spacing: float) -> bool:
    cx, cy = _center(cand)
    return all(math.hypot(cx - _center(b)[0], cy - _center(b)[1]) > spacing for b in boxes)


def generate(config: SynthConfig) -> Scene:
    """Build a scene of ``num_instances`` people from ``config.seed``.

    With ``overlap > 0`` the first two boxes are drawn until their IoU is at
    least ``0.8 * overlap``; all other boxes are placed uniformly. Raises
    :class:`GenerationFailedError` when constraints cannot be met within
    ``max_retries`` draws per box.
    """
    cfg = config
    rng = SplitMix64(cfg.seed)
    boxes: list[BBox] = []
    target = 0.8 * cfg.overlap
    for n in range(cfg.num_instances):
        for _ in range(cfg.max_retries):
            if n == 1 and cfg.overlap > 0:
                cand = _overlapping_box(rng, boxes[0], cfg)
                ok = box_iou(cand, boxes[0]) >= target
            else:
                cand = _random_box(rng, cfg)
                ok = True
            if ok and _spaced(boxes, cand, cfg.min_center_spacing):
                boxes.append(cand)
                break
        else:
            raise GenerationFailedError(
                f"could not place instance {n} (overlap={cfg.overlap}, spacing={cfg.min_center_spacing}) "
                f"after {cfg.max_retries} retries"
            )
    instances = tuple(
        Instance(id=n + 1, box=b, center=_center(b), keypoints=_keypoints(rng, b, cfg)) for n, b in enumerate(boxes)
    )
    return Scene(cfg.width, cfg.height, cfg.keypoint_count, instances)
