from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from app.core.constant import DomainTag
from app.schema.detection import Annotation, BBox, Detection


class AnnotationRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    x: float
    y: float
    w: float
    h: float
    cls: int = Field(alias="class")

    def to_annotation(self) -> Annotation:
        return Annotation(box=BBox(x=self.x, y=self.y, w=self.w, h=self.h), class_id=self.cls)

    @classmethod
    def from_annotation(cls, a: Annotation) -> "AnnotationRecord":
        return cls(x=a.box.x, y=a.box.y, w=a.box.w, h=a.box.h, cls=a.class_id)


class ManifestRecord(BaseModel):
    """One line of a split manifest"""

    scene_id: int
    image_path: str
    domain_tag: DomainTag
    annotations: List[AnnotationRecord]


class DetectionRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    x: float
    y: float
    w: float
    h: float
    cls: int = Field(alias="class")
    score: float

    def to_detection(self) -> Detection:
        return Detection(box=BBox(x=self.x, y=self.y, w=self.w, h=self.h), class_id=self.cls, score=self.score)

    @classmethod
    def from_detection(cls, d: Detection) -> "DetectionRecord":
        return cls(x=d.box.x, y=d.box.y, w=d.box.w, h=d.box.h, cls=d.class_id, score=d.score)


class PredictionRecord(BaseModel):
    """One line of a prediction dump"""

    scene_id: int
    detections: List[DetectionRecord]


class MetricsRecord(BaseModel):
    """One evaluation snapshot of a training run"""

    iter: int
    stage: str
    map_target: float
    per_class_ap: Dict[str, Optional[float]]
    loss_terms: Dict[str, float]


class AblationRow(BaseModel):
    variant: str
    seeds: List[int]
    maps: List[float]
    mean: float
    std: float
