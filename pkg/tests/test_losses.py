import numpy as np
import pytest

from app.core.exceptions import DimensionError
from app.models.detector import ExtractorOutput
from app.models.tensor import Tensor, log_softmax_rows
from app.schema.config import DistillConfig
from app.schema.detection import Annotation, BBox
from app.service.losses import (
    branch_loss, focal_softmax, label_anchors, match_proposals, rpn_loss_terms, sigmoid_focal, total_loss,
)
from conftest import grad_check

DISTILL = DistillConfig()


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _ann(x, y, w, h, c=0):
    return Annotation(box=BBox(x=x, y=y, w=w, h=h), class_id=c)


def test_focal_reduces_to_cross_entropy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.normal(size=(6, 4)) * 3
        labels = rng.integers(0, 4, size=6)
        focal = focal_softmax(Tensor(logits), labels, gamma=0.0, alpha=1.0).item()
        ce = -log_softmax_rows(Tensor(logits)).data[np.arange(6), labels].mean()
        assert focal == pytest.approx(ce, abs=1e-9)


def test_focal_softmax_one_row_by_hand():
    logits = np.array([[0.2, 1.0, -0.5, 0.1]])
    p = np.exp(logits[0]) / np.exp(logits[0]).sum()
    expected = -0.25 * (1 - p[1]) ** 2 * np.log(p[1])
    assert focal_softmax(Tensor(logits), [1]).item() == pytest.approx(expected, abs=1e-12)


def test_focal_softmax_shape_contract():
    with pytest.raises(DimensionError):
        focal_softmax(Tensor(np.zeros((2, 3))), [0])
    assert focal_softmax(Tensor(np.zeros((0, 3))), []).item() == 0.0


def test_sigmoid_focal_two_anchors_by_hand():
    x = np.array([0.7, -0.4])
    p = _sigmoid(x)
    expected = -0.25 * (1 - p[0]) ** 2 * np.log(p[0]) - 0.75 * p[1] ** 2 * np.log(1 - p[1])
    assert sigmoid_focal(Tensor(x), [1, 0]).item() == pytest.approx(expected, abs=1e-12)
    # ignored anchors contribute nothing; normalization counts positives only
    assert sigmoid_focal(Tensor(np.append(x, 3.0)), [1, 0, -1]).item() == pytest.approx(expected, abs=1e-12)
    doubled = sigmoid_focal(Tensor(np.array([0.7, 0.7])), [1, 1]).item()
    assert doubled == pytest.approx(-0.25 * (1 - p[0]) ** 2 * np.log(p[0]), abs=1e-12)


def test_label_anchors_rules():
    anchors = np.array([
        [0.0, 0.0, 10.0, 10.0],
        [2.0, 0.0, 10.0, 10.0],
        [5.0, 0.0, 10.0, 10.0],
        [40.0, 40.0, 10.0, 10.0],
    ])
    labels, matched = label_anchors(anchors, np.array([[0.0, 0.0, 10.0, 10.0]]))
    # IoU 1, 2/3, 1/3, 0
    np.testing.assert_array_equal(labels, [1, 1, -1, 0])
    np.testing.assert_array_equal(matched[:2], [0, 0])


def test_label_anchors_best_anchor_rule_and_empty_gt():
    anchors = np.array([[0.0, 0.0, 10.0, 10.0], [30.0, 30.0, 10.0, 10.0]])
    labels, _ = label_anchors(anchors, np.array([[6.0, 6.0, 10.0, 10.0]]))
    assert labels[0] == 1
    labels, _ = label_anchors(anchors, np.zeros((0, 4)))
    np.testing.assert_array_equal(labels, [0, 0])


def _two_anchor_output(objectness, deltas):
    return ExtractorOutput(Tensor(np.zeros((1, 1, 2))), Tensor(objectness, requires_grad=True),
                           Tensor(deltas, requires_grad=True))


def test_rpn_terms_two_anchors_by_hand():
    anchors = np.array([[0.0, 0.0, 8.0, 8.0], [20.0, 20.0, 8.0, 8.0]])
    gt = np.array([[0.0, 0.0, 8.0, 8.0]])
    x = np.array([1.5, -2.0])
    p = _sigmoid(x)
    focal = -0.25 * (1 - p[0]) ** 2 * np.log(p[0]) - 0.75 * p[1] ** 2 * np.log(1 - p[1])

    exact = rpn_loss_terms(_two_anchor_output(x, np.zeros((2, 4))), anchors, gt, DISTILL)
    assert exact.cls.item() == pytest.approx(focal, abs=1e-12)
    assert exact.reg.item() == 0.0

    deltas = np.array([[0.5, -2.0, 0.0, 0.1], [9.0, 9.0, 9.0, 9.0]])
    shifted = rpn_loss_terms(_two_anchor_output(x, deltas), anchors, gt, DISTILL)
    assert shifted.reg.item() == pytest.approx(0.125 + 1.5 + 0.0 + 0.005, abs=1e-12)


def test_rpn_terms_without_annotations():
    anchors = np.array([[0.0, 0.0, 8.0, 8.0], [20.0, 20.0, 8.0, 8.0]])
    out = rpn_loss_terms(_two_anchor_output(np.array([0.0, 0.0]), np.ones((2, 4))), anchors, np.zeros((0, 4)),
                         DISTILL)
    assert out.reg.item() == 0.0
    assert out.cls.item() == pytest.approx(2 * -0.75 * 0.25 * np.log(0.5), abs=1e-12)


def test_match_proposals_background_below_threshold():
    proposals = np.array([[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 4.0, 4.0]])
    labels, matched = match_proposals(proposals, np.array([[0.0, 0.0, 10.0, 10.0]]), np.array([2]), background=3)
    np.testing.assert_array_equal(labels, [2, 3])
    labels, _ = match_proposals(proposals, np.zeros((0, 4)), np.zeros(0, dtype=int), background=3)
    np.testing.assert_array_equal(labels, [3, 3])


def test_branch_loss_background_is_near_zero():
    logits = np.tile([-10.0, -10.0, -10.0, 10.0], (3, 1))
    proposals = np.array([[0.0, 0.0, 5.0, 5.0], [10.0, 10.0, 5.0, 5.0], [20.0, 0.0, 5.0, 5.0]])
    loss = branch_loss(Tensor(logits), Tensor(np.zeros((3, 4))), proposals, [], DISTILL)
    assert 0.0 <= loss.total.item() < 1e-12
    assert loss.reg.item() == 0.0


def test_branch_loss_one_proposal_by_hand():
    logits = np.array([[0.3, 1.2, -0.4, 0.0]])
    deltas = np.array([[0.5, 0.0, -2.0, 0.0]])
    proposals = np.array([[4.0, 4.0, 10.0, 10.0]])
    loss = branch_loss(Tensor(logits), Tensor(deltas), proposals, [_ann(4, 4, 10, 10, 1)], DISTILL)
    p = np.exp(logits[0]) / np.exp(logits[0]).sum()
    assert loss.cls.item() == pytest.approx(-0.25 * (1 - p[1]) ** 2 * np.log(p[1]), abs=1e-12)
    assert loss.reg.item() == pytest.approx(0.125 + 1.5, abs=1e-12)


def test_branch_loss_shape_contract():
    with pytest.raises(DimensionError):
        branch_loss(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))), np.zeros((3, 4)), [], DISTILL)


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    anchors = np.array([[0.0, 0.0, 8.0, 8.0], [4.0, 4.0, 8.0, 8.0], [20.0, 20.0, 8.0, 8.0]])
    gt = [_ann(1, 1, 8, 7, 0), _ann(19, 21, 9, 8, 2)]
    output = ExtractorOutput(Tensor(np.zeros((1, 1, 3))), Tensor(rng.normal(size=3), requires_grad=True),
                             Tensor(rng.normal(size=(3, 4)) * 0.3, requires_grad=True))
    logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    deltas = Tensor(rng.normal(size=(3, 4)) * 0.05, requires_grad=True)
    gt_boxes = np.array([a.box.as_tuple() for a in gt])

    def loss():
        terms = {
            "rpn": rpn_loss_terms(output, anchors, gt_boxes, DISTILL).total,
            "roi": branch_loss(logits, deltas, anchors, gt, DISTILL).total,
        }
        return total_loss(terms)

    grad_check(loss, [output.objectness, output.deltas, logits, deltas], h=1e-5)


def test_losses_are_finite_and_nonnegative():
    rng = np.random.default_rng(3)
    anchors = np.column_stack([rng.uniform(0, 40, (10, 2)), np.full((10, 2), 8.0)])
    for _ in range(20):
        output = _two_anchor_output(rng.normal(size=10) * 4, rng.normal(size=(10, 4)))
        gt = np.column_stack([rng.uniform(0, 40, (2, 2)), rng.uniform(4, 12, (2, 2))])
        terms = rpn_loss_terms(output, anchors, gt, DISTILL)
        assert np.isfinite(terms.total.item()) and terms.cls.item() >= 0 and terms.reg.item() >= 0
