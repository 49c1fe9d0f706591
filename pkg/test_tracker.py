import numpy as np
import pytest

from bench import bench_track
from config import TrackerConfig
from geometry import BoundingBox, ImageFrame, InvalidArgument, RangeClass, VideoSequence, iou
from synthcam import OccluderSpec, SceneSpec, VehicleSpec, render_sequence, sample_vehicle
from tracker import (Failure, Track, TrackSource, build_pyramid, lk_track_point, median_flow_step,
                     ncc_fallback_step, point_tracks, track_iou, track_vehicle)

CFG = TrackerConfig()


def pattern(x, y):
    return (0.5 + 0.2 * np.sin(0.2 * x + 0.07 * y) + 0.15 * np.cos(0.15 * y - 0.12 * x)
            + 0.1 * np.sin(0.09 * x + 0.21 * y))


def frame(width=160, height=120, dx=0.0, dy=0.0):
    """Smooth texture moved by (dx, dy), sampled at pixel centers."""
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return ImageFrame(pattern(gx - dx, gy - dy))


def test_pyramid_levels():
    f = frame(101, 75)
    pyr = build_pyramid(f, 3)
    assert np.array_equal(pyr.levels[0], f.intensity)
    assert pyr.shapes == [(101, 75), (51, 38), (26, 19)]
    flat = build_pyramid(ImageFrame(np.full((32, 32), 0.4)), 3)
    for level in flat.levels:
        assert np.allclose(level, 0.4)


def test_pyramid_rejects_tiny_frames():
    with pytest.raises(InvalidArgument):
        build_pyramid(ImageFrame(np.zeros((3, 3))), 3)


def test_lk_recovers_translation():
    prev = build_pyramid(frame(), 3)
    nxt = build_pyramid(frame(dx=3.0, dy=-2.0), 3)
    (qx, qy), ok = lk_track_point(prev, nxt, (60.5, 50.5), CFG)
    assert ok
    assert qx == pytest.approx(63.5, abs=0.1)
    assert qy == pytest.approx(48.5, abs=0.1)


def test_lk_identity_is_exact():
    pyr = build_pyramid(frame(), 3)
    q, ok = lk_track_point(pyr, pyr, (70.25, 33.75), CFG)
    assert ok
    assert q == (70.25, 33.75)


def test_lk_flat_window_does_not_converge():
    flat = build_pyramid(ImageFrame(np.full((64, 64), 0.3)), 3)
    _, ok = lk_track_point(flat, flat, (32.0, 32.0), CFG)
    assert not ok


def test_lk_point_must_be_inside():
    pyr = build_pyramid(frame(), 3)
    with pytest.raises(InvalidArgument):
        lk_track_point(pyr, pyr, (-1.0, 5.0), CFG)


def test_forward_backward_error_zero_on_identical_frames():
    f = frame()
    tracks = point_tracks(f, f, BoundingBox(50, 40, 40, 30), CFG)
    assert len(tracks) == CFG.grid ** 2
    converged = [t for t in tracks if t.converged]
    assert len(converged) >= 50
    assert all(t.fb_error == 0.0 and t.forward == t.start for t in converged)


def test_median_flow_identity():
    f = frame()
    b = BoundingBox(50.3, 40.7, 40.2, 30.9)
    assert median_flow_step(f, f, b, CFG) == b


def test_median_flow_translation():
    b = BoundingBox(50, 40, 40, 30)
    out = median_flow_step(frame(), frame(dx=5.0, dy=3.0), b, CFG)
    assert not isinstance(out, Failure)
    assert out.x == pytest.approx(55.0, abs=0.1)
    assert out.y == pytest.approx(43.0, abs=0.1)
    assert out.w == pytest.approx(40.0, abs=0.5)


def test_median_flow_is_translation_equivariant():
    b = BoundingBox(50, 40, 40, 30)
    base = median_flow_step(frame(), frame(dx=3.0, dy=-2.0), b, CFG)
    moved = median_flow_step(frame(dx=7.0, dy=5.0), frame(dx=10.0, dy=3.0), b.translated(7, 5), CFG)
    assert not isinstance(base, Failure) and not isinstance(moved, Failure)
    assert moved.x - base.x == pytest.approx(7.0, abs=0.1)
    assert moved.y - base.y == pytest.approx(5.0, abs=0.1)
    assert moved.w == pytest.approx(base.w, abs=0.1)
    assert moved.h == pytest.approx(base.h, abs=0.1)


def test_median_flow_follows_a_2x_zoom():
    c = (80.0, 60.0)
    gx, gy = np.meshgrid(np.arange(160) + 0.5, np.arange(120) + 0.5)
    zoomed = ImageFrame(pattern(c[0] + (gx - c[0]) / 2.0, c[1] + (gy - c[1]) / 2.0))
    out = median_flow_step(frame(), zoomed, BoundingBox(60, 45, 40, 30), CFG)
    assert not isinstance(out, Failure)
    assert out.w == pytest.approx(80.0, rel=0.05)
    assert out.h == pytest.approx(60.0, rel=0.05)
    assert out.center[0] == pytest.approx(80.0, abs=1.0)
    assert out.center[1] == pytest.approx(60.0, abs=1.0)


def test_median_flow_rejects_implausible_scale():
    c = (80.0, 60.0)
    gx, gy = np.meshgrid(np.arange(160) + 0.5, np.arange(120) + 0.5)
    zoomed = ImageFrame(pattern(c[0] + (gx - c[0]) / 2.0, c[1] + (gy - c[1]) / 2.0))
    cfg = TrackerConfig(max_scale_change=1.5)
    assert isinstance(median_flow_step(frame(), zoomed, BoundingBox(60, 45, 40, 30), cfg), Failure)


def test_median_flow_fails_when_the_box_is_covered():
    prev = frame()
    covered = prev.intensity.copy()
    covered[13:107, 18:142] = 0.5
    out = median_flow_step(prev, ImageFrame(covered), BoundingBox(50, 45, 60, 30), CFG)
    assert isinstance(out, Failure)


def test_median_flow_fails_on_blank_next_frame():
    blank = ImageFrame(np.full((120, 160), 0.5))
    out = median_flow_step(frame(), blank, BoundingBox(50, 40, 40, 30), CFG)
    assert isinstance(out, Failure)


def test_median_flow_rejects_off_image_box():
    f = frame()
    with pytest.raises(InvalidArgument):
        median_flow_step(f, f, BoundingBox(500, 500, 10, 10), CFG)


def test_ncc_fallback_integer_shift():
    b = BoundingBox(60, 40, 30, 24)
    res = ncc_fallback_step(frame(), frame(dx=4.0, dy=-3.0), b, CFG)
    assert res.box == BoundingBox(64, 37, 30, 24)
    assert not res.flagged
    assert res.score == pytest.approx(1.0, abs=1e-6)


def test_ncc_fallback_flags_border_peak():
    cfg = TrackerConfig(ncc_search_radius=4)
    res = ncc_fallback_step(frame(), frame(dx=4.0), BoundingBox(60, 40, 30, 24), cfg)
    assert res.offset == (4, 0)
    assert res.flagged


def test_ncc_fallback_flags_shift_beyond_radius():
    rng = np.random.default_rng(4)
    prev = rng.random((120, 160))
    nxt = np.roll(prev, 30, axis=1)
    res = ncc_fallback_step(ImageFrame(prev), ImageFrame(nxt), BoundingBox(60, 40, 30, 24), CFG)
    assert res.flagged
    assert res.score < CFG.fallback_min_ncc
    assert max(abs(res.offset[0]), abs(res.offset[1])) <= CFG.ncc_search_radius


def test_ncc_fallback_off_image_keeps_box():
    b = BoundingBox(400, 400, 10, 10)
    res = ncc_fallback_step(frame(), frame(), b, CFG)
    assert res.box == b and res.flagged


def test_static_scene_track_is_exact():
    f = frame()
    seq = VideoSequence((f,) * 40, sequence_id='static')
    b = BoundingBox(50.5, 40.25, 41.0, 29.5)
    track = track_vehicle(seq, b, CFG, vehicle_id='static:0')
    assert track.boxes == (b,) * 40
    assert track.fallback_frames == []
    assert track.boxes[-1] is b


def test_track_follows_moving_content():
    frames = tuple(frame(dx=2.0 * t) for t in range(5))
    seq = VideoSequence(frames)
    last = BoundingBox(68, 40, 36, 30)
    track = track_vehicle(seq, last, CFG)
    for t, box in enumerate(track.boxes):
        expected = last.x - 2.0 * (4 - t)
        assert box.x == pytest.approx(expected, abs=0.2)
        assert box.y == pytest.approx(last.y, abs=0.2)
    assert track_iou(track, [last.translated(-2.0 * (4 - t), 0) for t in range(5)])[0] > 0.95


def test_track_needs_last_box_on_frame():
    seq = VideoSequence((frame(),) * 2)
    with pytest.raises(InvalidArgument):
        track_vehicle(seq, BoundingBox(1000, 1000, 5, 5), CFG)


def test_track_document():
    boxes = (BoundingBox(1, 2, 3, 4), BoundingBox(2, 2, 3, 4))
    t = Track(boxes, (TrackSource.FALLBACK, TrackSource.MEDIAN_FLOW), (True, False), 's', 's:0')
    doc = t.to_dict()
    assert doc['source'] == ['fb', 'mf']
    assert doc['flagged'] == [0]
    assert Track.from_dict(doc) == t
    with pytest.raises(InvalidArgument):
        track_iou(t, boxes[:1])


def test_track_holds_the_box_through_full_occlusion():
    spec = SceneSpec(320, 180, (VehicleSpec(0.5, 25.0, 0.3, -2.0, texture_seed=3),),
                     background_seed=5, occluder=OccluderSpec(10, 15, 0))
    seq, truth = render_sequence(spec, sequence_id='occluded')
    boxes = truth.vehicles[0].boxes
    track = track_vehicle(seq, boxes[-1], CFG)
    assert len(track) == 40
    assert track.boxes[-1] == boxes[-1]
    assert set(range(10, 15)) <= set(track.fallback_frames)
    assert all(track.flagged[t] for t in range(10, 14))
    assert iou(track.boxes[8], boxes[8]) >= 0.6
    assert iou(track.boxes[0], boxes[0]) >= 0.5


@pytest.mark.slow
def test_tracks_match_synthetic_ground_truth():
    ious = []
    for i in range(50):
        rng = np.random.default_rng([17, i])
        rc = RangeClass.ordered()[i % 3]
        v = sample_vehicle(rng, rc, 1280, 720, 40, 20.0, texture_seed=int(rng.integers(2 ** 31)))
        seq, truth = render_sequence(SceneSpec(1280, 720, (v,), background_seed=i))
        boxes = truth.vehicles[0].boxes
        ious.extend(track_iou(track_vehicle(seq, boxes[-1], CFG), boxes))
    assert np.mean(np.asarray(ious) >= 0.8) >= 0.95


@pytest.mark.slow
def test_median_flow_step_budget():
    assert bench_track(repeats=15)['track_ms'] <= 10.0
