"""Gaussian heatmap targets, dense ltrb box targets, and peak decoding."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .core import Grid, InvalidShapeError, KeypointSet, Scene, box_mask, round_half_up


@dataclass(frozen=True)
class EncodeParams:
    sigma: float = 2.0
    radius_cutoff: float = 3.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.radius_cutoff <= 0:
            raise ValueError("radius_cutoff must be > 0")


@dataclass(frozen=True)
class DecodeParams:
    max_instances: int = 30
    center_threshold: float = 0.1
    nms_window: int = 3
    subpixel: bool = True

    def __post_init__(self):
        if self.max_instances < 1:
            raise ValueError("max_instances must be >= 1")
        if not 0 < self.center_threshold < 1:
            raise ValueError("center_threshold must lie in (0, 1)")
        if self.nms_window < 3 or self.nms_window % 2 == 0:
            raise ValueError("nms_window must be an odd integer >= 3")


def _splat(channel: np.ndarray, x: float, y: float, params: EncodeParams) -> None:
    """Max-combine one truncated Gaussian into ``channel`` in place."""
    h, w = channel.shape
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    d2 = (xs[None, :] - x) ** 2 + (ys[:, None] - y) ** 2
    g = np.exp(-d2 / (2.0 * params.sigma**2))
    g[d2 > (params.radius_cutoff * params.sigma) ** 2] = 0.0
    px, py = round_half_up(x), round_half_up(y)
    if 0 <= px < w and 0 <= py < h:
        g[py, px] = 1.0
    np.maximum(channel, g, out=channel)


def encode_center_map(scene: Scene, params: EncodeParams = EncodeParams()) -> Grid:
    out = np.zeros((1, scene.height, scene.width))
    for inst in scene.instances:
        _splat(out[0], inst.center[0], inst.center[1], params)
    return Grid(out)


def encode_keypoint_maps(scene: Scene, params: EncodeParams = EncodeParams()) -> Grid:
    """One channel per keypoint type; unlabeled (visibility 0) points are skipped."""
    out = np.zeros((max(scene.keypoint_count, 1), scene.height, scene.width))
    for inst in scene.instances:
        for k, (x, y, v) in enumerate(inst.keypoints.points):
            if v > 0:
                _splat(out[k], x, y, params)
    return Grid(out)


def encode_bbox_targets(scene: Scene) -> tuple[Grid, Grid]:
    """Per-pixel ``(left, top, right, bottom)`` distances and the ownership mask.

    Pixels covered by several boxes go to the smallest box (ties: lower id).
    """
    h, w = scene.height, scene.width
    targets = np.zeros((4, h, w))
    mask = np.zeros((1, h, w))
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    # Paint largest first so smaller boxes overwrite contested pixels.
    order = sorted(scene.instances, key=lambda inst: (inst.box.area, inst.id), reverse=True)
    for inst in order:
        b = inst.box
        m = box_mask(b, w, h)
        ltrb = np.stack(
            np.broadcast_arrays(xs - b.x_min, ys - b.y_min, b.x_max - xs, b.y_max - ys)
        )
        targets[:, m] = ltrb[:, m]
        mask[0, m] = 1.0
    return Grid(targets), Grid(mask)


def _refine(line: np.ndarray, i: int) -> float:
    left = line[i - 1] if i > 0 else -np.inf
    right = line[i + 1] if i + 1 < line.shape[0] else -np.inf
    if right > left:
        return float(i) + 0.25
    if left > right:
        return float(i) - 0.25
    return float(i)


def decode_centers(center_map, params: DecodeParams = DecodeParams()) -> list[tuple[float, float, float]]:
    """Local maxima over an ``nms_window`` square, best first, as ``(x, y, score)``.

    With ``params.subpixel`` each peak moves a quarter pixel toward its larger
    neighbour on each axis.
    """
    arr = np.asarray(center_map, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise InvalidShapeError(f"center map must have shape (1, H, W), got {arr.shape}")
    heat = arr[0]
    peaks = maximum_filter(heat, size=params.nms_window, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((heat == peaks) & (heat >= params.center_threshold))
    scores = heat[ys, xs]
    # Stable ordering: score descending, then raster order.
    order = np.lexsort((xs, ys, -scores))[: params.max_instances]
    if not params.subpixel:
        return [(float(xs[i]), float(ys[i]), float(scores[i])) for i in order]
    return [(_refine(heat[ys[i], :], xs[i]), _refine(heat[:, xs[i]], ys[i]), float(scores[i])) for i in order]


def decode_keypoints(instance_maps) -> KeypointSet:
    """Argmax per channel with a quarter-pixel shift toward the larger neighbour."""
    arr = np.asarray(instance_maps, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidShapeError(f"keypoint maps must be rank 3, got {arr.shape}")
    k, h, w = arr.shape
    pts = np.zeros((k, 3))
    scores = np.zeros(k)
    for c in range(k):
        flat = int(np.argmax(arr[c]))
        y, x = divmod(flat, w)
        peak = arr[c, y, x]
        scores[c] = max(peak, 0.0)
        if peak <= 0:
            pts[c] = (x, y, 0)
            continue
        pts[c] = (_refine(arr[c, y, :], x), _refine(arr[c, :, x], y), 2)
    pts[:, 0] = np.clip(pts[:, 0], 0, w - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, h - 1)
    return KeypointSet(pts, scores)


def group_keypoints(keypoint_maps, centers, e_norm=None, beta: float = 10.0) -> list[KeypointSet]:
    """Split bottom-up keypoint maps between detected centers and decode each part.

    Every pixel is owned by one center: the most similar one in embedding
    space when ``e_norm`` is given, otherwise the nearest one. This stands in
    for a learned per-instance keypoint head.
    """
    maps = np.asarray(keypoint_maps, dtype=np.float64)
    _, h, w = maps.shape
    if not centers:
        return []
    cx = np.array([c[0] for c in centers])
    cy = np.array([c[1] for c in centers])
    if e_norm is not None:
        e = np.asarray(e_norm, dtype=np.float64)
        p = e[:, cy.round().astype(int), cx.round().astype(int)]  # (D, M)
        d = ((e[:, None] - p[:, :, None, None]) ** 2).mean(axis=0)  # (M, H, W)
        affinity = np.exp(-beta * d)
    else:
        xs = np.arange(w)[None, None, :]
        ys = np.arange(h)[None, :, None]
        affinity = -((xs - cx[:, None, None]) ** 2 + (ys - cy[:, None, None]) ** 2)
    owner = np.argmax(affinity, axis=0)
    return [decode_keypoints(maps * (owner == m)[None]) for m in range(len(centers))]


def write_pgm(path, grid, channel: int = 0, vmin: float | None = None, vmax: float | None = None) -> None:
    """Write one channel as an ASCII (P2) greymap scaled to 0-255.

    The range defaults to the channel's min/max; a constant channel maps to 0
    unless ``vmin``/``vmax`` are given.
    """
    arr = np.asarray(grid, dtype=np.float64)[channel]
    lo = arr.min() if vmin is None else vmin
    hi = arr.max() if vmax is None else vmax
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.rint((arr - lo) * scale), 0, 255).astype(int)
    h, w = pix.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in pix]
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_pgm(path) -> np.ndarray:
    with open(path) as fh:
        tokens = [t for line in fh if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4 : 4 + w * h], dtype=int).reshape(h, w)
