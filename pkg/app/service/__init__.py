# Service layer package
# Only modules free of app.models are re-exported; app.models.detector imports app.service.boxes
from app.service.boxes import iou, nms, flip_boxes
from app.service.fourier import fft2d, ifft2d, fda_transfer
from app.service.scenes import (
    generate_source,
    apply_domain_shift,
    weak_augment,
    strong_augment
)
from app.service.evaluation import evaluate_map

__all__ = [
    # Boxes
    "iou",
    "nms",
    "flip_boxes",

    # Fourier transfer
    "fft2d",
    "ifft2d",
    "fda_transfer",

    # Scenes
    "generate_source",
    "apply_domain_shift",
    "weak_augment",
    "strong_augment",

    # Evaluation
    "evaluate_map"
]
