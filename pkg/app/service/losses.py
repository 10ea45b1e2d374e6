"""
Loss Service
RPN objectness (sigmoid focal) and regression, branch classification
(softmax focal over C + 1 classes) and regression, with the Faster RCNN
anchor and proposal matching rules.
"""
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import DimensionError
from app.models.detector import DualBranchModel, ExtractorOutput
from app.models.tensor import (
    Tensor, add, add_scalar, exp, gather_rows, log_sigmoid, log_softmax_rows, mean_all, mul, pow_scalar,
    scale, sigmoid, smooth_l1, sum_all, sum_rows,
)
from app.schema.config import DistillConfig
from app.schema.detection import Annotation, annotations_to_arrays
from app.service.boxes import encode_deltas, iou_matrix, normalize_roi_deltas


class LossPair(NamedTuple):
    cls: Tensor
    reg: Tensor

    @property
    def total(self) -> Tensor:
        return add(self.cls, self.reg)


def zero() -> Tensor:
    return Tensor(0.0)


def total_loss(terms: Dict[str, Tensor]) -> Tensor:
    total = zero()
    for value in terms.values():
        total = add(total, value)
    return total


def one_hot(labels: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(labels), width))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def focal_softmax(logits: Tensor, labels: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """
    Mean over rows of -alpha * (1 - p_t)^gamma * log p_t; gamma 0 and alpha 1
    give plain cross-entropy
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or len(labels) != logits.shape[0]:
        raise DimensionError("focal_softmax labels do not match logits", logits.shape, labels.shape)
    if len(labels) == 0:
        return zero()
    log_pt = sum_rows(mul(log_softmax_rows(logits), Tensor(one_hot(labels, logits.shape[1]))))
    modulator = pow_scalar(add_scalar(scale(exp(log_pt), -1.0), 1.0), gamma)
    return scale(mean_all(mul(modulator, log_pt)), -alpha)


def sigmoid_focal(logits: Tensor, labels: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """
    Binary focal loss summed over labeled entries (1 positive, 0 negative,
    -1 ignored) and divided by max(1, number of positives)
    """
    labels = np.asarray(labels)
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    total = zero()
    if len(pos):
        x = gather_rows(logits, pos)
        modulator = pow_scalar(add_scalar(scale(sigmoid(x), -1.0), 1.0), gamma)
        total = add(total, scale(sum_all(mul(modulator, log_sigmoid(x))), -alpha))
    if len(neg):
        x = gather_rows(logits, neg)
        modulator = pow_scalar(sigmoid(x), gamma)
        total = add(total, scale(sum_all(mul(modulator, log_sigmoid(scale(x, -1.0)))), -(1.0 - alpha)))
    return scale(total, 1.0 / max(1, len(pos)))


def label_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.5,
                  neg_iou: float = 0.3) -> Tuple[np.ndarray, np.ndarray]:
    """
    Anchor labels (1 positive, 0 negative, -1 ignored) and matched GT index.

    Positive: IoU >= pos_iou with some GT, or the best anchor of a GT.
    Negative: IoU < neg_iou with every GT.
    """
    n = len(anchors)
    matched = np.zeros(n, dtype=np.int64)
    if len(gt_boxes) == 0:
        return np.zeros(n, dtype=np.int64), matched
    ious = iou_matrix(anchors, gt_boxes)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    labels = np.full(n, -1, dtype=np.int64)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    for g in range(len(gt_boxes)):
        column = ious[:, g]
        if column.max() <= 0:
            continue
        winners = np.nonzero(column == column.max())[0]
        labels[winners] = 1
        matched[winners] = g
    return labels, matched


def rpn_loss_terms(output: ExtractorOutput, anchors: np.ndarray, gt_boxes: np.ndarray,
                   config: DistillConfig) -> LossPair:
    """RPN objectness focal loss and smooth-L1 on positive anchors"""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels, matched = label_anchors(anchors, gt_boxes, config.rpn_pos_iou, config.rpn_neg_iou)
    cls = sigmoid_focal(output.objectness, labels, config.focal_gamma, config.focal_alpha)
    pos = np.nonzero(labels == 1)[0]
    if len(pos) == 0:
        return LossPair(cls, zero())
    targets = encode_deltas(anchors[pos], gt_boxes[matched[pos]])
    reg = smooth_l1(gather_rows(output.deltas, pos), targets, config.smooth_l1_beta)
    return LossPair(cls, scale(sum_all(reg), 1.0 / len(pos)))


def rpn_loss(model: DualBranchModel, image: np.ndarray, annotations: Sequence[Annotation],
             config: DistillConfig) -> Tensor:
    boxes, _ = annotations_to_arrays(annotations)
    output = model.extractor(image)
    return rpn_loss_terms(output, model.extractor.anchors, boxes, config).total


def match_proposals(proposal_boxes: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                    background: int, fg_iou: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """
    Class label of every proposal (background below ``fg_iou``) and the index
    of its best GT box
    """
    n = len(proposal_boxes)
    labels = np.full(n, background, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    if len(gt_boxes) == 0 or n == 0:
        return labels, matched
    ious = iou_matrix(proposal_boxes, gt_boxes)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    fg = best >= fg_iou
    labels[fg] = np.asarray(gt_labels)[matched[fg]]
    return labels, matched


def branch_loss(
    class_logits: Tensor,
    box_deltas: Tensor,
    proposal_boxes: np.ndarray,
    annotations: Sequence[Annotation],
    config: DistillConfig,
    num_classes: Optional[int] = None,
) -> LossPair:
    """
    Softmax focal loss over proposals plus smooth-L1 on foreground proposals'
    normalized deltas

    Args:
        class_logits: (K, C + 1) logits, background last
        box_deltas: (K, 4) deltas
        proposal_boxes: (K, 4) proposal boxes the deltas refine
        annotations: Ground truth or pseudo labels of the image
    """
    num_classes = class_logits.shape[1] - 1 if num_classes is None else num_classes
    proposal_boxes = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)
    if class_logits.shape[0] != len(proposal_boxes) or box_deltas.shape != (len(proposal_boxes), 4):
        raise DimensionError("branch outputs do not match proposals", class_logits.shape, box_deltas.shape,
                             proposal_boxes.shape)
    gt_boxes, gt_labels = annotations_to_arrays(annotations)
    labels, matched = match_proposals(proposal_boxes, gt_boxes, gt_labels, num_classes, config.roi_fg_iou)
    cls = focal_softmax(class_logits, labels, config.focal_gamma, config.focal_alpha)
    fg = np.nonzero(labels != num_classes)[0]
    if len(fg) == 0:
        return LossPair(cls, zero())
    targets = normalize_roi_deltas(encode_deltas(proposal_boxes[fg], gt_boxes[matched[fg]]))
    reg = smooth_l1(gather_rows(box_deltas, fg), targets, config.smooth_l1_beta)
    return LossPair(cls, scale(sum_all(reg), 1.0 / len(fg)))
