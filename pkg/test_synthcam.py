import math

import numpy as np
import pytest

from dataset import load_dataset, read_json
from geometry import InvalidArgument, RangeClass
from synthcam import (DEFAULT_PROFILE, CameraIntrinsics, SceneSpec, VehicleSpec, VehicleState,
                      background_texture, generate_dataset, load_truth, pinhole_velocity, project_vehicle,
                      render_sequence, sample_vehicle, stratified_counts, vehicle_contrast)

CAM = CameraIntrinsics(1000.0, 640.0, 360.0)


def test_projection_examples():
    b = project_vehicle(VehicleState(0.0, 20.0, 2.0, 1.5), CAM)
    assert b.w == pytest.approx(100.0)
    assert b.center[0] == pytest.approx(640.0)
    off = project_vehicle(VehicleState(1.0, 20.0, 2.0, 1.5), CAM)
    assert off.center[0] - 640.0 == pytest.approx(50.0)


def test_doubling_depth_halves_the_box():
    near = project_vehicle(VehicleState(0.5, 15.0, 1.8, 1.4), CAM)
    far = project_vehicle(VehicleState(0.5, 30.0, 1.8, 1.4), CAM)
    assert far.w == near.w / 2
    assert far.h == near.h / 2


def test_projection_needs_positive_depth():
    with pytest.raises(InvalidArgument):
        project_vehicle(VehicleState(0.0, 0.0, 1.8, 1.5), CAM)


@pytest.mark.parametrize('Z', [6.0, 13.3, 27.0, 81.5])
def test_box_area_follows_inverse_square_depth(Z):
    b = project_vehicle(VehicleState(-1.2, Z, 1.9, 1.6), CAM)
    assert b.area * Z * Z / (CAM.f ** 2 * 1.9 * 1.6) == pytest.approx(1.0, rel=1e-12)


def test_static_vehicle_boxes_identical():
    spec = SceneSpec(320, 180, (VehicleSpec(0.5, 25.0, 0.0, 0.0, texture_seed=1),), frames=40)
    _, truth = render_sequence(spec)
    boxes = truth.vehicles[0].boxes
    assert len(boxes) == 40
    assert all(b == boxes[0] for b in boxes)


def test_approaching_vehicle_kinematics():
    spec = SceneSpec(640, 360, (VehicleSpec(0.0, 30.0, 0.0, -5.0, width=1.8),), fps=20.0, frames=40)
    _, truth = render_sequence(spec)
    v = truth.vehicles[0]
    assert v.position[1] == pytest.approx(20.25)
    assert v.boxes[-1].w == pytest.approx(spec.intrinsics.f * 1.8 / 20.25)
    assert v.velocity == (0.0, -5.0)
    ann = v.annotation('seq:0')
    assert ann.range_class is RangeClass.MEDIUM


def test_velocity_is_position_difference_times_fps():
    spec = SceneSpec(640, 360, (VehicleSpec(-1.0, 40.0, 0.8, -3.0),), fps=20.0, frames=10)
    _, truth = render_sequence(spec)
    pos = np.array(truth.vehicles[0].positions)
    diffs = np.diff(pos, axis=0) * spec.fps
    assert np.allclose(diffs, [0.8, -3.0], atol=1e-9)


def test_rendering_is_deterministic_and_contrasted():
    spec = SceneSpec(320, 180, (VehicleSpec(0.0, 18.0, 0.3, -2.0, texture_seed=4),), frames=8, background_seed=9)
    a, truth = render_sequence(spec)
    b, _ = render_sequence(spec)
    assert all(np.array_equal(x.intensity, y.intensity) for x, y in zip(a.frames, b.frames))
    background = background_texture(320, 180, 9)
    assert background.min() >= 0.0 and background.max() <= 0.45
    assert vehicle_contrast(a.frames[-1], truth.vehicles[0].boxes[-1], background) >= 0.2


def test_scene_rejects_vehicle_passing_the_camera():
    with pytest.raises(InvalidArgument):
        SceneSpec(320, 180, (VehicleSpec(0.0, 5.0, 0.0, -5.0),), frames=40)
    with pytest.raises(InvalidArgument):
        SceneSpec(320, 180, (VehicleSpec(0.0, 5.0, 0.0, 0.0),), frames=1)


def test_stratified_counts():
    assert stratified_counts(100, DEFAULT_PROFILE) == [12, 65, 23]
    assert stratified_counts(1, DEFAULT_PROFILE) == [0, 1, 0]
    assert sum(stratified_counts(37, DEFAULT_PROFILE)) == 37
    with pytest.raises(InvalidArgument):
        stratified_counts(5, [0, 0, 0])


@pytest.mark.parametrize('rc', RangeClass.ordered())
def test_sampled_vehicle_ends_in_its_band(rc):
    rng = np.random.default_rng(3)
    v = sample_vehicle(rng, rc, 640, 360, 40, 20.0, texture_seed=0)
    end = v.state_at(39 / 20.0)
    d = math.hypot(end.X, end.Z)
    spec = SceneSpec(640, 360, (v,), frames=40)
    _, truth = render_sequence(spec)
    assert truth.vehicles[0].annotation().range_class is rc
    assert truth.vehicles[0].distance == pytest.approx(d)


def test_generated_dataset_is_reproducible(tmp_path):
    kwargs = dict(n=3, seed=5, width=160, height=90, frames=6, sequences_per_drive=2)
    index_a = generate_dataset(tmp_path / 'a', **kwargs)
    index_b = generate_dataset(tmp_path / 'b', jobs=3, **kwargs)
    assert index_a.read_bytes() == index_b.read_bytes()
    for rel in read_json(index_a)['sequences']:
        assert (index_a.parent / rel).read_bytes() == (index_b.parent / rel).read_bytes()

    records = load_dataset(tmp_path / 'a')
    assert [r.sequence_id for r in records] == ['seq0000', 'seq0001', 'seq0002']
    assert [r.drive_id for r in records] == ['drive000', 'drive000', 'drive001']
    assert all(len(r) == 6 and r.annotations[0].has_truth for r in records)
    seq = records[0].load_sequence()
    assert seq.size == (160, 90)
    truth = load_truth(tmp_path / 'a' / 'seq0000' / 'truth.json')
    boxes = truth['seq0000:0']
    assert len(boxes) == 6
    assert boxes[-1] == records[0].annotations[0].last_frame_box


def test_single_sequence_dataset(tmp_path):
    index = generate_dataset(tmp_path, n=1, seed=0, width=160, height=90, frames=3)
    records = load_dataset(index)
    assert len(records) == 1
    assert records[0].annotations[0].range_class is RangeClass.MEDIUM


def test_pinhole_velocity_exact_for_nominal_width():
    spec = VehicleSpec(0.8, 30.0, 0.6, -5.0, width=1.8)
    cam = CameraIntrinsics.for_image(640, 360)
    boxes = [project_vehicle(spec.state_at(t / 20.0), cam) for t in range(40)]
    vx, vz = pinhole_velocity(boxes, cam, 20.0)
    assert vx == pytest.approx(0.6, abs=1e-6)
    assert vz == pytest.approx(-5.0, abs=1e-6)
    with pytest.raises(InvalidArgument):
        pinhole_velocity(boxes[:1], cam, 20.0)


@pytest.mark.parametrize('rc, ceiling', [(RangeClass.NEAR, 0.5), (RangeClass.MEDIUM, 1.0)])
def test_pinhole_baseline_solves_the_task_from_boxes(rc, ceiling):
    # true widths vary in [1.6, 2.0] m, the baseline always assumes 1.8 m
    cam = CameraIntrinsics.for_image(640, 360)
    errors = []
    for i in range(40):
        rng = np.random.default_rng([21, i])
        v = sample_vehicle(rng, rc, 640, 360, 40, 20.0, texture_seed=i)
        boxes = [project_vehicle(v.state_at(t / 20.0), cam) for t in range(40)]
        vx, vz = pinhole_velocity(boxes, cam, 20.0)
        errors.append((vx - v.vx) ** 2 + (vz - v.vz) ** 2)
    assert np.mean(errors) < ceiling
