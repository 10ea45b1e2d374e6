"""
Evaluation Service
VOC-style per-class average precision with greedy matching and all-point
interpolation, and mean AP over the classes that have ground truth.
"""
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from app.core.constant import CLASS_NAMES
from app.schema.detection import Annotation, Detection, annotations_to_arrays
from app.service.boxes import iou_matrix


class PRCurve(NamedTuple):
    precision: np.ndarray
    recall: np.ndarray


class MapResult(NamedTuple):
    map: float
    per_class_ap: Dict[int, Optional[float]]
    num_gt: Dict[int, int]
    curves: Dict[int, PRCurve]

    def named_ap(self) -> Dict[str, Optional[float]]:
        return {class_name(c): ap for c, ap in self.per_class_ap.items()}


def class_name(class_id: int) -> str:
    return CLASS_NAMES[class_id] if class_id < len(CLASS_NAMES) else f"class{class_id}"


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """
    Mean over GT boxes of the interpolated precision at each true positive;
    missed GT boxes contribute zero
    """
    if num_gt == 0:
        raise ValueError("average_precision needs at least one GT box")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    interpolated = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(interpolated[tp > 0]) / num_gt)


def _class_curve(
    predictions: Mapping[int, Sequence[Detection]],
    ground_truth: Mapping[int, Sequence[Annotation]],
    class_id: int,
    iou_threshold: float,
):
    gt_boxes = {}
    num_gt = 0
    for scene_id, annotations in ground_truth.items():
        picked = [a for a in annotations if a.class_id == class_id]
        boxes, _ = annotations_to_arrays(picked)
        gt_boxes[scene_id] = boxes
        num_gt += len(picked)
    ranked = [
        (scene_id, d) for scene_id, dets in predictions.items() for d in dets if d.class_id == class_id
    ]
    ranked.sort(key=lambda item: (-item[1].score, item[0], item[1].box.as_tuple()))
    used = {scene_id: np.zeros(len(b), dtype=bool) for scene_id, b in gt_boxes.items()}
    tp = np.zeros(len(ranked))
    for i, (scene_id, det) in enumerate(ranked):
        boxes = gt_boxes.get(scene_id)
        if boxes is None or len(boxes) == 0:
            continue
        overlaps = iou_matrix(np.asarray([det.box.as_tuple()]), boxes)[0]
        j = int(np.argmax(overlaps))
        if overlaps[j] >= iou_threshold and not used[scene_id][j]:
            used[scene_id][j] = True
            tp[i] = 1.0
    return tp, num_gt


def evaluate_map(
    predictions: Mapping[int, Sequence[Detection]],
    ground_truth: Mapping[int, Sequence[Annotation]],
    num_classes: int = len(CLASS_NAMES),
    iou_threshold: float = 0.5,
) -> MapResult:
    """
    Per-class AP and their mean.

    Args:
        predictions: Detections per scene id
        ground_truth: Annotations per scene id; scenes absent here have no GT
        num_classes: Number of foreground classes
        iou_threshold: Minimum IoU of a true positive

    Returns:
        MapResult; classes without GT get AP None and stay out of the mean
    """
    per_class: Dict[int, Optional[float]] = {}
    num_gt: Dict[int, int] = {}
    curves: Dict[int, PRCurve] = {}
    for c in range(num_classes):
        tp, n = _class_curve(predictions, ground_truth, c, iou_threshold)
        num_gt[c] = n
        if n == 0:
            per_class[c] = None
            continue
        ctp = np.cumsum(tp)
        ranks = np.arange(1, len(tp) + 1)
        curves[c] = PRCurve(ctp / ranks if len(tp) else np.zeros(0), ctp / n)
        per_class[c] = average_precision(tp, n)
    defined: List[float] = [ap for ap in per_class.values() if ap is not None]
    mean = float(np.mean(defined)) if defined else 0.0
    return MapResult(mean, per_class, num_gt, curves)


def proposal_recall(proposals: Mapping[int, np.ndarray], ground_truth: Mapping[int, Sequence[Annotation]],
                    iou_threshold: float = 0.5) -> float:
    """Fraction of GT boxes covered by some proposal at ``iou_threshold``"""
    hit, total = 0, 0
    for scene_id, annotations in ground_truth.items():
        boxes, _ = annotations_to_arrays(annotations)
        total += len(boxes)
        props = proposals.get(scene_id)
        if len(boxes) == 0 or props is None or len(props) == 0:
            continue
        hit += int((iou_matrix(boxes, props).max(axis=1) >= iou_threshold).sum())
    return hit / total if total else 0.0
