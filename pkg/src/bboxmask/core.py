"""Dense grids, boxes, keypoints and annotated scenes.

All coordinates live in heatmap resolution. A pixel ``(x, y)`` belongs to a
box when ``x_min <= x < x_max`` and ``y_min <= y < y_max`` (half-open), so two
boxes sharing an edge never claim the same pixel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class BBoxMaskError(Exception):
    """Base class for errors raised by this package."""


class InvalidShapeError(BBoxMaskError, ValueError):
    pass


class InvalidBoxError(BBoxMaskError, ValueError):
    pass


class SceneValidationError(BBoxMaskError, ValueError):
    pass


def round_half_up(v: float) -> int:
    # Python's round() is banker's rounding; pixel snapping must not depend on parity.
    return int(math.floor(v + 0.5))


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable ``(channels, height, width)`` array of finite doubles."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise InvalidShapeError(f"grid must be rank 3 with positive dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidShapeError("grid contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __getitem__(self, idx):
        return self.data[idx]

    def flat_index(self, c: int, y: int, x: int) -> int:
        if not (0 <= c < self.channels and 0 <= y < self.height and 0 <= x < self.width):
            raise IndexError((c, y, x))
        return (c * self.height + y) * self.width + x

    def unravel(self, k: int) -> tuple[int, int, int]:
        if not 0 <= k < self.data.size:
            raise IndexError(k)
        c, rem = divmod(k, self.height * self.width)
        y, x = divmod(rem, self.width)
        return c, y, x

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "data": [float(v) for v in self.data.ravel()],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Grid":
        _require_keys(obj, {"channels", "height", "width", "data"}, "grid")
        c, h, w = int(obj["channels"]), int(obj["height"]), int(obj["width"])
        if min(c, h, w) < 1:
            raise InvalidShapeError(f"grid dims must be positive, got {(c, h, w)}")
        data = np.asarray(obj["data"], dtype=np.float64)
        if data.size != c * h * w:
            raise InvalidShapeError(f"grid data length {data.size} != {c}*{h}*{w}")
        return cls(data.reshape(c, h, w))


def grid_new(channels: int, height: int, width: int, fill: float = 0.0) -> Grid:
    if min(channels, height, width) < 1:
        raise InvalidShapeError(f"grid dims must be >= 1, got {(channels, height, width)}")
    return Grid(np.full((channels, height, width), float(fill)))


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def clipped(self, width: float, height: float) -> "BBox":
        """Clip to ``[0, width] x [0, height]``; raises if nothing is left."""
        return BBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )


def box_iou(a: BBox, b: BBox) -> float:
    iw = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    ih = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_mask(box: BBox, width: int, height: int) -> np.ndarray:
    """Boolean ``(height, width)`` mask of the integer pixels inside ``box``."""
    xs = np.arange(width)
    ys = np.arange(height)
    in_x = (xs >= box.x_min) & (xs < box.x_max)
    in_y = (ys >= box.y_min) & (ys < box.y_max)
    return in_y[:, None] & in_x[None, :]


def box_coords(box: BBox, width: int, height: int) -> tuple[set[tuple[int, int]], set[tuple[int, int]]]:
    """Return ``(inside, complement)`` pixel sets as ``(x, y)`` tuples.

    An empty ``inside`` set means the box rasterizes to nothing; callers
    that need a non-empty box check for it.
    """
    mask = box_mask(box, width, height)
    ys, xs = np.nonzero(mask)
    inside = {(int(x), int(y)) for x, y in zip(xs, ys)}
    ys, xs = np.nonzero(~mask)
    outside = {(int(x), int(y)) for x, y in zip(xs, ys)}
    return inside, outside


@dataclass(frozen=True)
class KeypointSet:
    """``K`` keypoints as an ``(K, 3)`` array of ``x, y, visibility``.

    ``scores`` is only populated for predictions.
    """

    points: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise SceneValidationError("non-finite keypoint")
        if not np.all(np.isin(pts[:, 2], (0, 1, 2))):
            raise SceneValidationError("keypoint visibility must be 0, 1 or 2")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.scores is not None:
            sc = np.array(self.scores, dtype=np.float64, copy=True).reshape(-1)
            if sc.shape[0] != pts.shape[0]:
                raise SceneValidationError("one score per keypoint required")
            sc.setflags(write=False)
            object.__setattr__(self, "scores", sc)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def visibility(self) -> np.ndarray:
        return self.points[:, 2].astype(int)


@dataclass(frozen=True)
class Instance:
    id: int
    box: BBox
    center: tuple[float, float]
    keypoints: KeypointSet

    def __post_init__(self):
        if not self.box.contains(*self.center):
            raise SceneValidationError(f"instance {self.id}: center {self.center} outside box {self.box}")

    @property
    def center_pixel(self) -> tuple[int, int]:
        return round_half_up(self.center[0]), round_half_up(self.center[1])


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    keypoint_count: int
    instances: tuple[Instance, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.width < 1 or self.height < 1:
            raise SceneValidationError(f"scene dims must be positive, got {self.width}x{self.height}")
        if self.keypoint_count < 0:
            raise SceneValidationError("keypoint_count must be >= 0")
        ids = [inst.id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise SceneValidationError(f"duplicate instance ids in {ids}")
        for inst in self.instances:
            b = inst.box
            if b.x_min < 0 or b.y_min < 0 or b.x_max > self.width or b.y_max > self.height:
                raise SceneValidationError(f"instance {inst.id}: box {b.as_list()} not clipped to scene")
            if len(inst.keypoints) != self.keypoint_count:
                raise SceneValidationError(
                    f"instance {inst.id}: {len(inst.keypoints)} keypoints, expected {self.keypoint_count}"
                )
            pts = inst.keypoints.points
            vis = pts[:, 2] > 0
            if np.any((pts[vis, 0] < 0) | (pts[vis, 0] > self.width - 1) | (pts[vis, 1] < 0) | (pts[vis, 1] > self.height - 1)):
                raise SceneValidationError(f"instance {inst.id}: labeled keypoint outside image")

    def __len__(self) -> int:
        return len(self.instances)

    def instance(self, instance_id: int) -> Instance:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(f"no instance with id {instance_id}")

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "keypoint_count": self.keypoint_count,
            "instances": [
                {
                    "id": inst.id,
                    "box": [float(v) for v in inst.box.as_list()],
                    "center": [float(inst.center[0]), float(inst.center[1])],
                    "keypoints": [[float(x), float(y), int(v)] for x, y, v in inst.keypoints.points],
                }
                for inst in self.instances
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, obj: dict) -> "Scene":
        _require_keys(obj, {"width", "height", "keypoint_count", "instances"}, "scene")
        instances = []
        for n, raw in enumerate(obj["instances"]):
            _require_keys(raw, {"id", "box", "center", "keypoints"}, f"instances[{n}]")
            instances.append(
                Instance(
                    id=int(raw["id"]),
                    box=BBox(*map(float, raw["box"])),
                    center=(float(raw["center"][0]), float(raw["center"][1])),
                    keypoints=KeypointSet(np.asarray(raw["keypoints"], dtype=np.float64).reshape(-1, 3)),
                )
            )
        return cls(int(obj["width"]), int(obj["height"]), int(obj["keypoint_count"]), tuple(instances))

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))

    def rescaled(self, factor: float) -> "Scene":
        """Map input-image coordinates to heatmap coordinates (``factor=0.25`` for 4x downsampling)."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        out = []
        for inst in self.instances:
            b = BBox(*(v * factor for v in inst.box.as_list())).clipped(w, h)
            pts = np.array(inst.keypoints.points)
            pts[:, :2] *= factor
            pts[:, 0] = np.clip(pts[:, 0], 0, w - 1)
            pts[:, 1] = np.clip(pts[:, 1], 0, h - 1)
            cx = min(max(inst.center[0] * factor, b.x_min), b.x_max)
            cy = min(max(inst.center[1] * factor, b.y_min), b.y_max)
            out.append(Instance(inst.id, b, (cx, cy), KeypointSet(pts)))
        return Scene(w, h, self.keypoint_count, tuple(out))


def _require_keys(obj: dict, keys: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise SceneValidationError(f"{where}: expected an object")
    missing = keys - obj.keys()
    extra = obj.keys() - keys
    if missing:
        raise SceneValidationError(f"{where}: missing field(s) {sorted(missing)}")
    if extra:
        raise SceneValidationError(f"{where}: unknown field(s) {sorted(extra)}")
