import math

import pytest
from hypothesis import given, strategies as st

from sfmtrack.geometry import BBox, Point, area, center, center_error, iou, relative_speed

from conftest import boxes


def test_iou_identity():
    b = BBox(3, 4, 10, 7)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(BBox(0, 0, 10, 10), BBox(20, 20, 5, 5)) == 0.0


def test_iou_half_shifted():
    # overlap 5x10, union 100 + 100 - 50
    assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 10, 10)) == pytest.approx(50 / 150, abs=1e-15)


def test_touching_edges_have_zero_iou():
    assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 10, 10)) == 0.0


def test_center_examples():
    assert center(BBox(0, 0, 10, 10)) == Point(5, 5)
    assert center(BBox(2, 4, 6, 8)) == Point(5, 8)


def test_center_round_trip():
    b = BBox.from_center(7.25, -3.5, 4.0, 9.0)
    assert center(b) == Point(7.25, -3.5)


def test_center_error_examples():
    a = BBox(0, 0, 10, 10)
    assert center_error(a, a) == 0.0
    assert center_error(BBox.from_center(0, 0, 2, 2), BBox.from_center(3, 4, 6, 2)) == 5.0


def test_relative_speed_examples():
    a = BBox(0, 0, 10, 10)
    assert relative_speed(a, a) == 0.0
    assert relative_speed(a, a.translated(10, 0)) == 1.0


def test_invalid_boxes_rejected():
    for bad in [(0, 0, 0, 1), (0, 0, 1, -2), (math.nan, 0, 1, 1), (0, math.inf, 1, 1)]:
        with pytest.raises(ValueError):
            BBox(*bad)
    with pytest.raises(ValueError):
        Point(math.nan, 0)


def test_area():
    assert area(BBox(1, 1, 3, 4)) == 12 == BBox(1, 1, 3, 4).area


@given(boxes(), boxes())
def test_iou_bounded_and_symmetric(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)


@given(boxes())
def test_iou_self_is_one(b):
    assert iou(b, b) == pytest.approx(1.0, abs=1e-12)


@given(boxes(), boxes(), boxes())
def test_center_error_is_a_metric(a, b, c):
    assert center_error(a, b) >= 0
    assert center_error(a, b) == center_error(b, a)
    assert center_error(a, c) <= center_error(a, b) + center_error(b, c) + 1e-9


@given(boxes(), boxes())
def test_center_error_zero_iff_same_centre(a, b):
    moved = BBox.from_center(center(a).x, center(a).y, b.w, b.h)
    assert center_error(a, moved) == pytest.approx(0.0, abs=1e-9)


@given(boxes(), boxes(), st.floats(0.1, 10), st.floats(-300, 300), st.floats(-300, 300))
def test_relative_speed_scale_and_translation_invariant(a, b, k, dx, dy):
    base = relative_speed(a, b)
    assert relative_speed(a.scaled(k), b.scaled(k)) == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert relative_speed(a.translated(dx, dy), b.translated(dx, dy)) == pytest.approx(base, rel=1e-6, abs=1e-6)


@given(boxes(), st.floats(-300, 300), st.floats(-300, 300))
def test_center_error_translation_invariant(a, dx, dy):
    b = a.translated(3.0, -4.0)
    assert center_error(a.translated(dx, dy), b.translated(dx, dy)) == pytest.approx(5.0, abs=1e-9)
