import math

import numpy as np
import pytest

from geometry import (BoundingBox, ImageFrame, InvalidArgument, RangeClass, VehicleAnnotation,
                      VideoSequence, classify_range_by_distance, iou, range_proportions, rgb_to_luma,
                      sample_bilinear, shrink_box)


def test_box_rejects_degenerate_sizes():
    with pytest.raises(InvalidArgument):
        BoundingBox(0, 0, 0, 5)
    with pytest.raises(InvalidArgument):
        BoundingBox(0, 0, 5, -1)
    with pytest.raises(InvalidArgument):
        BoundingBox(float('nan'), 0, 5, 5)


@pytest.mark.parametrize('fraction', [0.1, 0.25, 0.5, 0.9])
def test_shrink_keeps_center(fraction):
    b = BoundingBox(12.3, 40.1, 33.0, 21.5)
    s = shrink_box(b, fraction)
    assert s.center == pytest.approx(b.center, abs=1e-12)
    assert s.w == pytest.approx(b.w * (1 - fraction))
    assert s.h == pytest.approx(b.h * (1 - fraction))


def test_shrink_edge_cases():
    b = BoundingBox(1, 2, 3, 4)
    assert shrink_box(b, 0.0) is b
    with pytest.raises(InvalidArgument):
        shrink_box(b, 1.0)
    with pytest.raises(InvalidArgument):
        shrink_box(b, -0.1)


def test_unit_scale_is_exact():
    b = BoundingBox(40.3, 17.7, 30.7, 22.1)
    assert b.scaled(1.0) == b
    assert b.scaled(1.0, 2.0, 0.0).x == b.x + 2.0


def test_iou():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(20, 20, 5, 5)) == 0.0
    assert iou(a, BoundingBox(5, 0, 10, 10)) == pytest.approx(50 / 150)


@pytest.mark.parametrize('d, expected', [
    (0.0, RangeClass.NEAR),
    (19.999, RangeClass.NEAR),
    (20.0, RangeClass.MEDIUM),
    (44.999, RangeClass.MEDIUM),
    (45.0, RangeClass.FAR),
    (120.0, RangeClass.FAR),
])
def test_distance_ranges_are_half_open(d, expected):
    assert classify_range_by_distance(d) is expected


def test_distance_must_be_valid():
    with pytest.raises(InvalidArgument):
        classify_range_by_distance(-1.0)
    with pytest.raises(InvalidArgument):
        classify_range_by_distance(math.inf)


def test_range_proportions():
    props = range_proportions([5, 10, 25, 30, 60])
    assert props == {'near': 0.4, 'medium': 0.4, 'far': 0.2}


def test_bilinear_uses_pixel_centers():
    ramp = np.tile(np.arange(6, dtype=np.float64), (4, 1))
    assert sample_bilinear(ramp, [2.5], [1.5])[0] == pytest.approx(2.0)
    assert sample_bilinear(ramp, [2.0], [1.5])[0] == pytest.approx(1.5)
    # clamped outside
    assert sample_bilinear(ramp, [-3.0], [1.5])[0] == pytest.approx(0.0)


def test_luma_weights():
    rgb = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], dtype=np.uint8)
    assert rgb_to_luma(rgb)[0] == pytest.approx([0.299, 0.587, 0.114])


def test_frame_validation_and_immutability():
    with pytest.raises(InvalidArgument):
        ImageFrame(np.full((4, 4), 1.5))
    with pytest.raises(InvalidArgument):
        ImageFrame(np.zeros(5))
    src = np.zeros((3, 4))
    frame = ImageFrame(src)
    assert (frame.width, frame.height) == (4, 3)
    src[0, 0] = 1.0
    assert frame.intensity[0, 0] == 0.0
    with pytest.raises(ValueError):
        frame.intensity[0, 0] = 0.5


def test_sequence_needs_matching_frames():
    a = ImageFrame(np.zeros((4, 4)))
    b = ImageFrame(np.zeros((4, 5)))
    with pytest.raises(InvalidArgument):
        VideoSequence((a, b))
    with pytest.raises(InvalidArgument):
        VideoSequence(())
    with pytest.raises(InvalidArgument):
        VideoSequence((a,), fps=0)


def test_annotation_distance_and_range():
    ann = VehicleAnnotation(BoundingBox(0, 0, 10, 10), velocity=(1.0, -2.0), position=(3.0, 4.0))
    assert ann.distance == 5.0
    assert ann.range_class is RangeClass.NEAR
    assert ann.has_truth
    assert VehicleAnnotation(BoundingBox(0, 0, 1, 1)).distance is None
