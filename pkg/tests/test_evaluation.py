import numpy as np
import pytest

from app.schema.detection import Annotation, BBox, Detection
from app.service.evaluation import average_precision, evaluate_map, proposal_recall


def _ann(x, y, w, h, c=0):
    return Annotation(box=BBox(x=x, y=y, w=w, h=h), class_id=c)


def _det(x, y, w, h, c=0, s=1.0):
    return Detection(box=BBox(x=x, y=y, w=w, h=h), class_id=c, score=s)


GT = {
    1: [_ann(0, 0, 10, 10, 0), _ann(20, 20, 8, 8, 1)],
    2: [_ann(5, 5, 6, 12, 2), _ann(30, 30, 10, 10, 0)],
}


def test_perfect_predictions_score_one():
    predictions = {sid: [_det(*a.box.as_tuple(), c=a.class_id, s=1.0) for a in anns] for sid, anns in GT.items()}
    result = evaluate_map(predictions, GT)
    assert result.map == 1.0
    assert all(ap == 1.0 for ap in result.per_class_ap.values())


def test_no_predictions_score_zero():
    result = evaluate_map({}, GT)
    assert result.map == 0.0
    assert result.num_gt == {0: 2, 1: 1, 2: 1}


def test_three_predictions_two_gt_by_hand():
    truth = {7: [_ann(0, 0, 10, 10), _ann(40, 40, 10, 10)]}
    predictions = {7: [
        _det(0, 0, 10, 10, s=0.9),
        _det(20, 20, 10, 10, s=0.8),
        _det(40, 40, 10, 10, s=0.7),
    ]}
    # precision 1, 1/2, 2/3 at ranks 1..3; interpolated at the hits: 1 and 2/3
    result = evaluate_map(predictions, truth, num_classes=1)
    assert result.map == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-9)
    np.testing.assert_allclose(result.curves[0].precision, [1.0, 0.5, 2.0 / 3.0])
    np.testing.assert_allclose(result.curves[0].recall, [0.5, 0.5, 1.0])


def test_duplicate_detection_counts_once():
    truth = {1: [_ann(0, 0, 10, 10)]}
    predictions = {1: [_det(0, 0, 10, 10, s=0.9), _det(0, 0, 10, 10, s=0.8)]}
    result = evaluate_map(predictions, truth, num_classes=1)
    assert result.map == 1.0
    np.testing.assert_allclose(result.curves[0].precision, [1.0, 0.5])


def test_class_without_ground_truth_is_undefined():
    truth = {1: [_ann(0, 0, 10, 10, 0)]}
    predictions = {1: [_det(0, 0, 10, 10, 0, 0.9), _det(30, 30, 5, 5, 2, 0.9)]}
    result = evaluate_map(predictions, truth)
    assert result.per_class_ap[1] is None and result.per_class_ap[2] is None
    assert result.map == 1.0
    assert result.named_ap() == {"box": 1.0, "disk": None, "bar": None}


def test_low_iou_is_a_miss():
    truth = {1: [_ann(0, 0, 10, 10)]}
    predictions = {1: [_det(6, 6, 10, 10, s=0.9)]}
    assert evaluate_map(predictions, truth, num_classes=1).map == 0.0


def test_invariant_to_order_within_equal_scores():
    truth = {1: [_ann(0, 0, 10, 10)], 2: [_ann(10, 10, 10, 10)]}
    dets = {
        1: [_det(0, 0, 10, 10, s=0.5), _det(50, 50, 5, 5, s=0.5)],
        2: [_det(30, 30, 5, 5, s=0.5), _det(10, 10, 10, 10, s=0.5)],
    }
    flipped = {sid: list(reversed(d)) for sid, d in reversed(list(dets.items()))}
    assert evaluate_map(dets, truth, num_classes=1).map == evaluate_map(flipped, truth, num_classes=1).map


def test_average_precision_needs_ground_truth():
    assert average_precision(np.zeros(0), 3) == 0.0
    with pytest.raises(ValueError):
        average_precision(np.ones(2), 0)


def test_proposal_recall():
    truth = {1: [_ann(0, 0, 10, 10), _ann(30, 30, 10, 10)]}
    proposals = {1: np.array([[0.0, 0.0, 10.0, 10.0], [31.0, 31.0, 2.0, 2.0]])}
    assert proposal_recall(proposals, truth) == 0.5
    assert proposal_recall({}, truth) == 0.0
