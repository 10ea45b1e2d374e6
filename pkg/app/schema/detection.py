from typing import Iterable, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator


class BBox(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    w: float
    h: float

    @field_validator("w", "h")
    @classmethod
    def positive_extent(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("box extents must be positive")
        return v

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def cx(self) -> float:
        return self.x + 0.5 * self.w

    @property
    def cy(self) -> float:
        return self.y + 0.5 * self.h

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "BBox":
        return cls(x=float(row[0]), y=float(row[1]), w=float(row[2]), h=float(row[3]))


class Annotation(BaseModel):
    model_config = ConfigDict(frozen=True)

    box: BBox
    class_id: int


class Detection(BaseModel):
    model_config = ConfigDict(frozen=True)

    box: BBox
    class_id: int
    score: float

    @field_validator("score")
    @classmethod
    def finite_score(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("detection score must be finite")
        return v


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    rows = [b.as_tuple() for b in boxes]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def annotations_to_arrays(annotations: Sequence[Annotation]) -> Tuple[np.ndarray, np.ndarray]:
    boxes = boxes_to_array(a.box for a in annotations)
    labels = np.asarray([a.class_id for a in annotations], dtype=np.int64)
    return boxes, labels


def detections_to_annotations(detections: Iterable[Detection]) -> List[Annotation]:
    return [Annotation(box=d.box, class_id=d.class_id) for d in detections]


class Proposal(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    box: BBox
    objectness: float
    feature: np.ndarray

    @field_validator("objectness")
    @classmethod
    def unit_objectness(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("objectness must lie in [0, 1]")
        return v

    @field_validator("feature")
    @classmethod
    def finite_feature(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if not np.isfinite(v).all():
            raise ValueError("proposal feature must be finite")
        return v
