"""Per-stage timings: Median-Flow step, feature assembly, ensemble inference."""

import time
from statistics import median

import numpy as np

from config import AreaSplitConfig, FeatureConfig, TrackerConfig, get_logger
from cues import assemble_features
from ensemble import RangeEnsemble, predict
from geometry import RangeClass
from regressor import MlpModel, MlpTopology, init_parameters
from synthcam import SceneSpec, VehicleSpec, render_sequence
from tracker import Track, TrackSource, median_flow_step

log = get_logger('Bench')

STAGES = ('track', 'features', 'mlp')


def median_ms(fn, repeats: int, warmup: int = 2) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1000.0)
    return median(times)


def _scene(width, height, frames):
    spec = SceneSpec(width, height, (VehicleSpec(0.8, 25.0, 0.3, -3.0, texture_seed=7),),
                     frames=frames, background_seed=11)
    return render_sequence(spec, sequence_id='bench')


def bench_track(width=1280, height=720, repeats=20) -> dict:
    seq, truth = _scene(width, height, 2)
    box = truth.vehicles[0].boxes[1]
    cfg = TrackerConfig()
    ms = median_ms(lambda: median_flow_step(seq.frames[1], seq.frames[0], box, cfg), repeats)
    return {'track_ms': ms, 'image_size': [width, height], 'box_px': [round(box.w, 1), round(box.h, 1)]}


def bench_features(repeats=50) -> dict:
    _, truth = _scene(640, 360, 40)
    boxes = truth.vehicles[0].boxes
    track = Track(boxes, (TrackSource.MEDIAN_FLOW,) * len(boxes))
    cfg = FeatureConfig(image_width=640, image_height=360)
    ms = median_ms(lambda: assemble_features(track, None, None, cfg), repeats)
    return {'features_ms': ms}


def bench_mlp(input_dim=33, models=5, repeats=200) -> dict:
    rng = np.random.default_rng(0)
    topology = MlpTopology(input_dim, 4, 70)
    fleet = tuple(MlpModel(topology, init_parameters(topology, rng), np.zeros(input_dim), np.ones(input_dim))
                  for _ in range(models))
    e = RangeEnsemble(AreaSplitConfig(1e9, 1.0), {RangeClass.MEDIUM: fleet})
    x = rng.standard_normal(input_dim)
    ms = median_ms(lambda: predict(e, x, 1000.0), repeats)
    return {'mlp_ms': ms, 'models': models, 'topology': '4x70'}


def run_bench(stage: str = 'all', repeats: int = 0) -> dict:
    stages = STAGES if stage == 'all' else (stage,)
    results = {}
    for s in stages:
        kwargs = {'repeats': repeats} if repeats > 0 else {}
        if s == 'track':
            results.update(bench_track(**kwargs))
        elif s == 'features':
            results.update(bench_features(**kwargs))
        elif s == 'mlp':
            results.update(bench_mlp(**kwargs))
    for key, value in results.items():
        if key.endswith('_ms'):
            log.info(f'{key[:-3]}: {value:.3f} ms (median)')
    return results
