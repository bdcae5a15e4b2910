"""Box arithmetic and the ground-truth scenery-change label.

Boxes are continuous ``(x0, y0, x1, y1)`` rectangles, origin top-left. The
motion of an object between two frames is ``1 - IoU`` of its two boxes, or 1
when it is visible in only one of them; a frame pair counts as *changed* when
the largest motion strictly exceeds the variation threshold.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import DomainError, GeometryError


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates {coords}")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise GeometryError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise GeometryError(f"expected 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class ObjectAnnotation:
    object_id: str
    class_id: int
    box: BoundingBox


class SceneryLabel(enum.IntEnum):
    UNCHANGED = 0
    CHANGED = 1


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two valid boxes."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def _index(objs: Iterable[ObjectAnnotation]) -> dict[str, ObjectAnnotation]:
    out: dict[str, ObjectAnnotation] = {}
    for obj in objs:
        if obj.object_id in out:
            raise GeometryError(f"duplicate object_id {obj.object_id!r} in frame")
        out[obj.object_id] = obj
    return out


def motion_field(
    objs_i: Iterable[ObjectAnnotation], objs_j: Iterable[ObjectAnnotation]
) -> dict[str, float]:
    """Per-object motion between two frames, keyed by object id.

    Objects present in both frames get ``1 - IoU`` of their boxes; objects
    present in only one frame get 1.
    """
    a, b = _index(objs_i), _index(objs_j)
    field: dict[str, float] = {}
    for key in sorted(set(a) | set(b)):
        if key in a and key in b:
            field[key] = 1.0 - iou(a[key].box, b[key].box)
        else:
            field[key] = 1.0
    return field


def max_motion(field: Mapping[str, float]) -> float:
    # an empty field means no objects of interest, hence no semantic variation
    return max(field.values(), default=0.0)


def label_from_motion(max_mfi: float, tau_var: float) -> SceneryLabel:
    if not 0.0 <= tau_var <= 1.0:
        raise DomainError(f"tau_var must lie in [0, 1], got {tau_var}")
    return SceneryLabel.CHANGED if max_mfi > tau_var else SceneryLabel.UNCHANGED


def scenery_change(
    objs_i: Iterable[ObjectAnnotation],
    objs_j: Iterable[ObjectAnnotation],
    tau_var: float,
) -> SceneryLabel:
    return label_from_motion(max_motion(motion_field(objs_i, objs_j)), tau_var)
