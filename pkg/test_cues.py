import numpy as np
import pytest

from config import FeatureConfig
from cues import (CueSeries, DenseMap, FeatureVector, FlowField, aggregate_in_box, assemble_features,
                  decode_flow, decode_pfm, encode_flow, encode_pfm, feature_length, gaussian_kernel,
                  gaussian_smooth, layout_version, load_depth_sequence, load_features,
                  load_flow_field, load_flow_sequence, sampled_frames, save_disparity_map,
                  save_features, save_flow_field)
from geometry import BoundingBox, FormatError, InvalidArgument, UnsupportedFormat
from tracker import Track, TrackSource


def flo_bytes(width, height, payload, magic=202021.25):
    return (np.array([magic], dtype='<f4').tobytes() + np.array([width, height], dtype='<i4').tobytes()
            + np.array(payload, dtype='<f4').tobytes())


def static_track(n, box=BoundingBox(40, 30, 20, 10)):
    return Track((box,) * n, (TrackSource.MEDIAN_FLOW,) * n, sequence_id='seq0000')


SMALL = FeatureConfig(image_width=128, image_height=72)


# ─── formats ─────────────────────────────────────────────────────────────────

def test_flo_decodes_interleaved_uv():
    flow = decode_flow(flo_bytes(2, 1, [1.0, 0.0, -1.0, 0.5]))
    assert flow.u.values.tolist() == [[1.0, -1.0]]
    assert flow.v.values.tolist() == [[0.0, 0.5]]


def test_flo_rejects_bad_input():
    with pytest.raises(FormatError):
        decode_flow(flo_bytes(2, 1, [1.0, 0.0, -1.0, 0.5], magic=1.0))
    with pytest.raises(FormatError, match='byte'):
        decode_flow(flo_bytes(2, 2, [1.0, 0.0, -1.0, 0.5]))
    with pytest.raises(FormatError):
        decode_flow(b'\x00' * 5)
    with pytest.raises(FormatError):
        decode_flow(flo_bytes(1, 1, [np.nan, 0.0]))


def test_flo_file_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    u = DenseMap(rng.normal(size=(7, 11)).astype(np.float32))
    v = DenseMap(rng.normal(size=(7, 11)).astype(np.float32))
    path = tmp_path / 'a.flo'
    save_flow_field(path, u, v)
    u2, v2 = load_flow_field(path)
    assert np.array_equal(u2.values, u.values)
    assert np.array_equal(v2.values, v.values)
    assert path.read_bytes() == encode_flow(FlowField(u, v))


def test_pfm_single_cell():
    data = b'Pf\n1 1\n-1.0\n' + np.array([0.25], dtype='<f4').tobytes()
    assert decode_pfm(data).values.tolist() == [[0.25]]


def test_pfm_rows_are_bottom_up_and_scale_sets_endianness():
    data = b'Pf\n1 2\n1.0\n' + np.array([2.0, 1.0], dtype='>f4').tobytes()
    assert decode_pfm(data).values.tolist() == [[1.0], [2.0]]


def test_pfm_errors():
    with pytest.raises(UnsupportedFormat):
        decode_pfm(b'PF\n1 1\n-1.0\n' + bytes(12))
    with pytest.raises(FormatError):
        decode_pfm(b'Pf\n-1 1\n-1.0\n')
    with pytest.raises(FormatError):
        decode_pfm(b'Pf\n1 1\n0\n' + bytes(4))
    with pytest.raises(FormatError):
        decode_pfm(b'Pf\n2 2\n-1.0\n' + bytes(4))


def test_pfm_round_trip(tmp_path):
    m = DenseMap(np.arange(12, dtype=np.float32).reshape(3, 4) / 7)
    assert np.array_equal(decode_pfm(encode_pfm(m)).values, m.values)
    save_disparity_map(tmp_path / 'seq' / 'disp_0000.pfm', m)
    save_disparity_map(tmp_path / 'seq' / 'disp_0001.pfm', m)
    maps = load_depth_sequence(tmp_path, 'seq', 2)
    assert len(maps) == 2 and np.array_equal(maps[1].values, m.values)


def test_flow_sequence_reads_one_map_per_frame_pair(tmp_path):
    zero = DenseMap(np.zeros((2, 2), dtype=np.float32))
    for i in range(3):
        save_flow_field(tmp_path / 'seq' / f'flow_{i:04d}.flo', zero, zero)
    assert len(load_flow_sequence(tmp_path, 'seq', 4)) == 3
    with pytest.raises(OSError):
        load_flow_sequence(tmp_path, 'seq', 5)


def test_dense_map_must_be_finite():
    with pytest.raises(InvalidArgument):
        DenseMap(np.array([[1.0, np.inf]]))


# ─── aggregation ─────────────────────────────────────────────────────────────

def test_aggregate_central_cells():
    m = DenseMap(np.arange(1, 17, dtype=np.float64).reshape(4, 4))
    assert aggregate_in_box(m, BoundingBox(1, 1, 2, 2), (4, 4), 0.0) == 8.5
    # same box in a video twice the map resolution
    assert aggregate_in_box(m, BoundingBox(2, 2, 4, 4), (8, 8), 0.0) == 8.5


@pytest.mark.parametrize('box', [BoundingBox(0, 0, 64, 36), BoundingBox(10.3, 7.7, 3.1, 2.2),
                                 BoundingBox(127, 71, 0.5, 0.5)])
def test_aggregate_constant_map(box):
    m = DenseMap(np.full((18, 32), 2.75))
    assert aggregate_in_box(m, box, (128, 72), 0.1) == pytest.approx(2.75)


def test_aggregate_tiny_box_samples_center():
    ramp = DenseMap(np.tile(np.arange(8, dtype=np.float64), (8, 1)))
    value = aggregate_in_box(ramp, BoundingBox(3.9, 2.9, 0.2, 0.2), (8, 8), 0.1)
    assert value == pytest.approx(3.5)


def test_aggregate_box_outside_frame():
    m = DenseMap(np.zeros((4, 4)))
    with pytest.raises(InvalidArgument):
        aggregate_in_box(m, BoundingBox(10, 10, 2, 2), (4, 4), 0.1)


# ─── smoothing ───────────────────────────────────────────────────────────────

def test_gaussian_impulse_response():
    impulse = np.zeros(9)
    impulse[4] = 1.0
    out = gaussian_smooth(CueSeries('u', impulse), 5, 1.0).values
    assert out[2:7] == pytest.approx([0.0545, 0.2442, 0.4026, 0.2442, 0.0545], abs=1e-4)
    assert gaussian_kernel(5, 1.0).sum() == pytest.approx(1.0)


def test_gaussian_constant_and_ramp():
    const = gaussian_smooth(CueSeries('d', np.full(6, 3.5)), 5, 1.0).values
    assert const == pytest.approx([3.5] * 6)
    ramp = np.arange(10, dtype=np.float64)
    out = gaussian_smooth(CueSeries('d', ramp), 5, 1.0).values
    assert len(out) == 10
    assert out[2:8] == pytest.approx(ramp[2:8], abs=1e-12)


def test_gaussian_is_linear():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=20), rng.normal(size=20)
    lhs = gaussian_smooth(CueSeries('u', 2.0 * a - 0.5 * b), 5, 1.0).values
    rhs = 2.0 * gaussian_smooth(CueSeries('u', a), 5, 1.0).values - 0.5 * gaussian_smooth(CueSeries('u', b), 5, 1.0).values
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_gaussian_needs_odd_taps():
    with pytest.raises(InvalidArgument):
        gaussian_kernel(4, 1.0)
    with pytest.raises(InvalidArgument):
        gaussian_smooth(CueSeries('u', [1.0]), 6, 1.0)


# ─── feature vectors ─────────────────────────────────────────────────────────

def test_sampled_frames_run_backwards_from_last():
    assert sampled_frames(40, 5) == [39, 34, 29, 24, 19, 14, 9, 4]
    assert sampled_frames(3, 5) == [2]


def test_feature_lengths():
    assert feature_length(40, FeatureConfig()) == 33
    assert feature_length(40, FeatureConfig(include_flow=True, include_depth=True)) == 57
    assert feature_length(40, FeatureConfig(include_track=False, include_flow=True)) == 16
    assert layout_version(40, FeatureConfig(include_flow=True, include_depth=True)) == 'v1/track+flow+depth/skip5/n40'


@pytest.mark.parametrize('frames', range(1, 41))
def test_track_only_vector_matches_layout(frames):
    vec = assemble_features(static_track(frames), None, None, SMALL, vehicle_id='seq0000:0')
    assert len(vec) == feature_length(frames, SMALL)
    assert vec.layout_version == layout_version(frames, SMALL)


def test_full_vector_with_constant_maps_repeats_per_frame():
    n = 40
    cfg = FeatureConfig(image_width=128, image_height=72, include_flow=True, include_depth=True)
    flow = [FlowField(DenseMap(np.full((18, 32), 1.5)), DenseMap(np.full((18, 32), -0.5)))] * (n - 1)
    depth = [DenseMap(np.full((36, 64), 12.0))] * n
    vec = assemble_features(static_track(n), flow, depth, cfg)
    assert len(vec) == 57
    rows = vec.values[:-1].reshape(8, 7)
    assert np.allclose(rows, rows[0])
    assert rows[0] == pytest.approx([50 / 128, 35 / 72, 20 / 128, 10 / 72, 1.5, -0.5, 12.0])
    assert vec.values[-1] == pytest.approx(200 / (128 * 72))
    assert vec.last_frame_area == 200.0


def test_first_block_is_last_frame():
    n = 12
    boxes = tuple(BoundingBox(10 + 3 * t, 20, 16, 8) for t in range(n))
    track = Track(boxes, (TrackSource.MEDIAN_FLOW,) * n)
    cfg = FeatureConfig(image_width=128, image_height=72, smooth_track=False)
    vec = assemble_features(track, None, None, cfg)
    assert vec.values[0] == boxes[-1].center[0] / 128
    assert vec.values[4] == boxes[n - 1 - 5].center[0] / 128


def test_cue_count_mismatch():
    cfg = FeatureConfig(image_width=128, image_height=72, include_flow=True)
    zero = DenseMap(np.zeros((4, 4)))
    with pytest.raises(InvalidArgument):
        assemble_features(static_track(5), [FlowField(zero, zero)] * 5, None, cfg)
    with pytest.raises(InvalidArgument):
        assemble_features(static_track(5), None, [zero] * 4, cfg.with_channels(['track', 'depth']))


def test_features_file(tmp_path):
    a = FeatureVector([1.0, 2.0], 'v1/track/skip5/n2', vehicle_id='s:0', last_frame_area=9.0)
    b = FeatureVector([3.0, 4.0], 'v1/track/skip5/n2', vehicle_id='s:1')
    path = tmp_path / 'features.json'
    save_features(path, [a, b])
    loaded = load_features(path)
    assert [v.vehicle_id for v in loaded] == ['s:0', 's:1']
    assert loaded[0].values.tolist() == [1.0, 2.0]
    assert loaded[0].last_frame_area == 9.0
    with pytest.raises(InvalidArgument):
        save_features(path, [a, FeatureVector([1.0], 'v1/track/skip5/n1')])
