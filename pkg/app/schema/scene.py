from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from app.core.constant import DomainTag
from app.core.exceptions import ContractError, DimensionError, NumericError
from app.schema.detection import Annotation

MIN_IMAGE_SIDE = 8
BOX_TOLERANCE = 1e-6


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check an ImageF: (H, W, C) float array, C in {1, 3}, sides >= 8, pixels in [0, 1]"""
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise DimensionError("image must be (H, W, 1|3)", image.shape)
    if image.shape[0] < MIN_IMAGE_SIDE or image.shape[1] < MIN_IMAGE_SIDE:
        raise DimensionError(f"image sides must be >= {MIN_IMAGE_SIDE}", image.shape)
    if not np.isfinite(image).all():
        raise NumericError("image has non-finite pixels")
    if image.min() < 0.0 or image.max() > 1.0:
        raise NumericError(f"image pixels must lie in [0, 1], got [{image.min():.4g}, {image.max():.4g}]")
    return image


class LabeledScene(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    scene_id: int
    image: np.ndarray
    annotations: Tuple[Annotation, ...]
    domain_tag: DomainTag

    @field_validator("image")
    @classmethod
    def check_image(cls, v: np.ndarray) -> np.ndarray:
        return validate_image(np.asarray(v, dtype=np.float64))

    @model_validator(mode="after")
    def check_boxes_inside(self):
        height, width = self.image.shape[:2]
        for a in self.annotations:
            b = a.box
            if (b.x < -BOX_TOLERANCE or b.y < -BOX_TOLERANCE
                    or b.x + b.w > width + BOX_TOLERANCE or b.y + b.h > height + BOX_TOLERANCE):
                raise ContractError(f"scene {self.scene_id}: box {b.as_tuple()} lies outside the {width}x{height} image")
        return self

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


class Spectrum(BaseModel):
    """DC-centred per-channel 2D spectrum, coefficients shaped (C, H, W)"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    height: int
    width: int
    coeffs: np.ndarray

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.coeffs)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.coeffs)

    @property
    def center(self) -> Tuple[int, int]:
        return self.height // 2, self.width // 2
