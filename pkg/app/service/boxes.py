"""
Box Service
IoU, greedy per-class NMS and the Faster RCNN box-delta parameterization.
Array boxes are (N, 4) rows of (x, y, w, h).
"""
from typing import List, Sequence

import numpy as np

from app.schema.detection import BBox, Detection

# Faster RCNN clamps the log-size deltas before exponentiation
BBOX_XFORM_CLIP = float(np.log(1000.0 / 16.0))

# Second-stage regression targets are divided by these before the loss
ROI_DELTA_STDS = np.array([0.1, 0.1, 0.2, 0.2])


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area of two boxes"""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box arrays"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    ix = np.clip(np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, 0][:, None], b[:, 0][None, :]), 0, None)
    iy = np.clip(np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, 1][:, None], b[:, 1][None, :]), 0, None)
    inter = ix * iy
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(detections: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """
    Greedy per-class suppression.

    Detections are visited by descending score, ties broken by ascending
    original index; a detection is dropped when its IoU with an already kept
    detection of the same class exceeds ``iou_threshold``.

    Returns:
        Kept detections in visiting order
    """
    if not detections:
        return []
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    boxes = np.asarray([detections[i].box.as_tuple() for i in range(len(detections))])
    labels = np.asarray([d.class_id for d in detections])
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(detections), dtype=bool)
    kept = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(detections[i])
        suppressed |= (labels == labels[i]) & (overlaps[i] > iou_threshold)
    return kept


def flip_boxes(boxes: np.ndarray, image_width: float) -> np.ndarray:
    """Mirror (x, y, w, h) rows horizontally inside an image of ``image_width``"""
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, 0] = image_width - out[:, 0] - out[:, 2]
    return out


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) taking ``anchors`` onto ``targets``"""
    acx = anchors[:, 0] + 0.5 * anchors[:, 2]
    acy = anchors[:, 1] + 0.5 * anchors[:, 3]
    tcx = targets[:, 0] + 0.5 * targets[:, 2]
    tcy = targets[:, 1] + 0.5 * targets[:, 3]
    return np.stack([
        (tcx - acx) / anchors[:, 2],
        (tcy - acy) / anchors[:, 3],
        np.log(targets[:, 2] / anchors[:, 2]),
        np.log(targets[:, 3] / anchors[:, 3]),
    ], axis=1)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray, image_size: float) -> np.ndarray:
    """Apply deltas to anchors, clip to the image and keep at least 1 px extents"""
    acx = anchors[:, 0] + 0.5 * anchors[:, 2]
    acy = anchors[:, 1] + 0.5 * anchors[:, 3]
    cx = acx + deltas[:, 0] * anchors[:, 2]
    cy = acy + deltas[:, 1] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(np.minimum(deltas[:, 2], BBOX_XFORM_CLIP))
    h = anchors[:, 3] * np.exp(np.minimum(deltas[:, 3], BBOX_XFORM_CLIP))
    x1 = np.clip(cx - 0.5 * w, 0.0, image_size - 1.0)
    y1 = np.clip(cy - 0.5 * h, 0.0, image_size - 1.0)
    x2 = np.clip(cx + 0.5 * w, x1 + 1.0, image_size)
    y2 = np.clip(cy + 0.5 * h, y1 + 1.0, image_size)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)


def normalize_roi_deltas(deltas: np.ndarray) -> np.ndarray:
    return np.asarray(deltas) / ROI_DELTA_STDS


def denormalize_roi_deltas(deltas: np.ndarray) -> np.ndarray:
    return np.asarray(deltas) * ROI_DELTA_STDS
