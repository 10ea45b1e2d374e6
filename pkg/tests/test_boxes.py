import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.schema.detection import BBox, Detection
from app.service.boxes import (
    decode_deltas, denormalize_roi_deltas, encode_deltas, iou, iou_matrix, nms, normalize_roi_deltas,
)


def _det(x, y, w, h, c=0, s=0.5):
    return Detection(box=BBox(x=x, y=y, w=w, h=h), class_id=c, score=s)


def _reference_nms(detections, threshold):
    """O(n^2) greedy suppression written independently of the vectorized one"""
    remaining = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [
            i for i in remaining
            if detections[i].class_id != detections[best].class_id
            or iou(detections[i].box, detections[best].box) <= threshold
        ]
    return kept


def test_iou_cases():
    a = BBox(x=0, y=0, w=2, h=2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(x=5, y=5, w=1, h=1)) == 0.0
    assert iou(a, BBox(x=1, y=1, w=2, h=2)) == pytest.approx(1 / 7)


def test_iou_matrix_matches_scalar_iou():
    rng = np.random.default_rng(0)
    a = np.column_stack([rng.uniform(0, 20, (5, 2)), rng.uniform(1, 10, (5, 2))])
    b = np.column_stack([rng.uniform(0, 20, (4, 2)), rng.uniform(1, 10, (4, 2))])
    m = iou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert m[i, j] == pytest.approx(iou(BBox.from_array(a[i]), BBox.from_array(b[j])))


def test_nms_cases():
    disjoint = [_det(0, 0, 2, 2), _det(10, 10, 2, 2), _det(20, 0, 2, 2)]
    assert nms(disjoint, 0.5) == disjoint
    twins = [_det(0, 0, 4, 4, s=0.8), _det(0, 0, 4, 4, s=0.9)]
    assert nms(twins, 0.5) == [twins[1]]
    other_class = [_det(0, 0, 4, 4, c=0, s=0.8), _det(0, 0, 4, 4, c=1, s=0.9)]
    assert len(nms(other_class, 0.5)) == 2
    assert nms([], 0.5) == []


def test_nms_ties_keep_original_order():
    dets = [_det(0, 0, 4, 4, s=0.5), _det(10, 10, 4, 4, s=0.5), _det(0, 0, 4, 4, s=0.5)]
    assert nms(dets, 0.5) == [dets[0], dets[1]]


def test_nms_matches_reference_on_random_configurations():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(0, 21))
        dets = [
            _det(*rng.uniform(0, 30, 2), *rng.uniform(2, 15, 2), c=int(rng.integers(0, 3)),
                 s=float(rng.choice([0.3, 0.5, 0.7, rng.uniform()])))
            for _ in range(n)
        ]
        threshold = float(rng.choice([0.3, 0.5, 0.7]))
        expected = [dets[i] for i in _reference_nms(dets, threshold)]
        assert nms(dets, threshold) == expected


box_rows = st.tuples(
    st.floats(0, 40), st.floats(0, 40), st.floats(1, 20), st.floats(1, 20),
    st.integers(0, 2), st.floats(0, 1),
)


@settings(max_examples=100)
@given(st.lists(box_rows, max_size=15), st.floats(0.1, 0.9))
def test_nms_is_idempotent(rows, threshold):
    dets = [_det(x, y, w, h, c, s) for x, y, w, h, c, s in rows]
    once = nms(dets, threshold)
    assert nms(once, threshold) == once


def test_deltas_round_trip_inside_image():
    rng = np.random.default_rng(1)
    anchors = np.column_stack([rng.uniform(5, 20, (6, 2)), rng.uniform(4, 12, (6, 2))])
    targets = np.column_stack([rng.uniform(5, 20, (6, 2)), rng.uniform(4, 12, (6, 2))])
    decoded = decode_deltas(anchors, encode_deltas(anchors, targets), image_size=64)
    np.testing.assert_allclose(decoded, targets, atol=1e-9)


def test_decode_clips_to_image():
    anchors = np.array([[0.0, 0.0, 8.0, 8.0]])
    decoded = decode_deltas(anchors, np.array([[-5.0, -5.0, 10.0, 10.0]]), image_size=16)
    x, y, w, h = decoded[0]
    assert x >= 0 and y >= 0 and x + w <= 16 and y + h <= 16 and w >= 1 and h >= 1


def test_roi_delta_normalization_inverts():
    deltas = np.array([[0.1, -0.2, 0.3, 0.05]])
    np.testing.assert_allclose(denormalize_roi_deltas(normalize_roi_deltas(deltas)), deltas)
    np.testing.assert_allclose(normalize_roi_deltas(deltas), [[1.0, -2.0, 1.5, 0.25]])
