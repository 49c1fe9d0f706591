# ensemble.py — Dash-cam velocity estimation
# encoding: utf-8
"""
Near / medium / far routing by last-frame box area, five drive-disjoint fold
models per range, and model averaging at prediction time.
"""

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from config import AreaSplitConfig, TrainConfig, get_logger
from dataset import read_json, write_json
from geometry import (InvalidArgument, MissingModel, RangeClass, classify_range_by_distance)
from regressor import MlpModel, MlpTopology, Sample, load_model, save_model, train

log = get_logger('Ensemble')

FOLDS = 5
MIN_PER_CLASS = 10
MANIFEST_NAME = 'ensemble.json'

TOPOLOGIES = {
    'full': {RangeClass.NEAR: (3, 40), RangeClass.MEDIUM: (4, 60), RangeClass.FAR: (4, 70)},
    'ablation': {RangeClass.NEAR: (3, 40), RangeClass.MEDIUM: (3, 40), RangeClass.FAR: (3, 40)},
}
REPLICAS = {'full': 1, 'ablation': 10}


# ─── Routing ─────────────────────────────────────────────────────────────────

def classify_range_by_area(area: float, split: AreaSplitConfig) -> RangeClass:
    """Boxes on a threshold go to the nearer class."""
    if not area > 0:
        raise InvalidArgument(f'box area must be > 0, got {area}')
    if area >= split.near_area_threshold:
        return RangeClass.NEAR
    if area <= split.far_area_threshold:
        return RangeClass.FAR
    return RangeClass.MEDIUM


def area_disagreement(areas, distances, split: AreaSplitConfig) -> int:
    return sum(classify_range_by_area(a, split) is not classify_range_by_distance(d)
               for a, d in zip(areas, distances))


def calibrate_area_thresholds(areas: Sequence[float], distances: Sequence[float]) -> AreaSplitConfig:
    """
    Exhaustive scan over observed areas for the (far, near) threshold pair that
    best reproduces the distance classes. Ties go to the larger thresholds.
    """
    areas = np.asarray(areas, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    if areas.shape != distances.shape or areas.ndim != 1:
        raise InvalidArgument('areas and distances must be equal-length sequences')
    if np.any(areas <= 0):
        raise InvalidArgument('box areas must be > 0')
    truth = np.array([classify_range_by_distance(d) for d in distances], dtype=object)
    counts = {rc: int(np.sum(truth == rc)) for rc in RangeClass.ordered()}
    short = {rc.value: n for rc, n in counts.items() if n < MIN_PER_CLASS}
    if short:
        raise InvalidArgument(f'calibration needs >= {MIN_PER_CLASS} samples per range, short: {short}')

    values = np.unique(areas)
    pos = np.searchsorted(values, areas)

    def cumulative(rc):
        return np.cumsum(np.bincount(pos[truth == rc], minlength=values.size))

    c_far, c_med, c_near = cumulative(RangeClass.FAR), cumulative(RangeClass.MEDIUM), cumulative(RangeClass.NEAR)
    n_near = counts[RangeClass.NEAR]

    # far threshold values[i], near threshold values[j], i < j
    best = (-1, 0, 1)
    run_val, run_i = None, 0
    for j in range(1, values.size):
        i = j - 1
        val = c_far[i] - c_med[i]
        if run_val is None or val >= run_val:
            run_val, run_i = val, i
        agree = run_val + c_med[j - 1] + n_near - c_near[j - 1]
        if agree >= best[0]:
            best = (int(agree), run_i, j)
    if best[0] < 0:
        raise InvalidArgument('need at least two distinct box areas')
    agree, i, j = best
    split = AreaSplitConfig(float(values[j]), float(values[i]))
    log.info(f'calibrated near>={split.near_area_threshold:.1f} far<={split.far_area_threshold:.1f} '
             f'disagreement={len(areas) - agree}/{len(areas)}')
    return split


# ─── Folds ───────────────────────────────────────────────────────────────────

def _drive_groups(samples: Sequence[Sample], rng: np.random.Generator) -> List[List[int]]:
    groups: Dict[str, List[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.drive_id or s.vehicle_id or str(i), []).append(i)
    keys = sorted(groups)
    return [groups[keys[k]] for k in rng.permutation(len(keys))]


def partition_folds(samples: Sequence[Sample], k: int = FOLDS, seed: int = 0) -> List[List[int]]:
    """Index folds; every drive lands in exactly one fold."""
    if k < 2:
        raise InvalidArgument(f'need at least 2 folds, got {k}')
    if len(samples) < k:
        raise InvalidArgument(f'{len(samples)} samples cannot fill {k} folds')
    groups = _drive_groups(samples, np.random.default_rng(seed))
    if len(groups) < k:
        raise InvalidArgument(f'{len(groups)} drives cannot fill {k} drive-disjoint folds')
    folds: List[List[int]] = [[] for _ in range(k)]
    for group in groups:
        smallest = min(range(k), key=lambda f: len(folds[f]))
        folds[smallest].extend(group)
    return [sorted(f) for f in folds]


def holdout_by_drive(samples: Sequence[Sample], fraction: float, seed: int = 0):
    """Withhold whole drives until `fraction` of the samples are held out."""
    if not 0.0 < fraction < 1.0:
        raise InvalidArgument(f'holdout fraction must be in (0, 1), got {fraction}')
    groups = _drive_groups(samples, np.random.default_rng(seed))
    if len(groups) < 2:
        raise InvalidArgument('holdout needs at least two drives')
    held: List[int] = []
    target = fraction * len(samples)
    for group in groups[:-1]:
        if len(held) >= target:
            break
        held.extend(group)
    held_set = set(held)
    train_part = [s for i, s in enumerate(samples) if i not in held_set]
    holdout = [samples[i] for i in sorted(held)]
    proportions = {rc.value: 0.0 for rc in RangeClass.ordered()}
    known = [s.distance for s in holdout if s.distance is not None]
    for d in known:
        proportions[classify_range_by_distance(d).value] += 1.0 / len(known)
    return train_part, holdout, proportions


# ─── Ensembles ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RangeEnsemble:
    split: AreaSplitConfig
    models: Dict[RangeClass, Tuple[MlpModel, ...]] = field(default_factory=dict)
    profile: str = 'full'

    def populated(self) -> List[RangeClass]:
        return [rc for rc in RangeClass.ordered() if self.models.get(rc)]

    @property
    def layout_version(self) -> str:
        for rc in self.populated():
            return self.models[rc][0].layout_version
        return ''


def _job_seed(seed: int, rc: RangeClass, fold: int, replica: int) -> int:
    index = RangeClass.ordered().index(rc)
    return int(np.random.SeedSequence([seed, index, fold, replica]).generate_state(1)[0])


def train_ensemble(samples: Sequence[Sample], split: AreaSplitConfig, cfg: TrainConfig,
                   profile: str = 'full', route_train: str = 'bucketed', seed: int = 0,
                   jobs: int = 1, folds: int = FOLDS, activation: str = 'crelu') -> RangeEnsemble:
    if profile not in TOPOLOGIES:
        raise InvalidArgument(f'unknown profile {profile!r}')
    if not samples:
        raise InvalidArgument('no training samples')
    buckets: Dict[RangeClass, List[Sample]] = {rc: [] for rc in RangeClass.ordered()}
    for s in samples:
        buckets[classify_range_by_area(s.last_frame_area, split)].append(s)
    input_dim = len(np.asarray(samples[0].features))

    work = {}
    for rc in RangeClass.ordered():
        if not buckets[rc]:
            log.warning(f'{rc.value}: empty bucket, no models trained')
            continue
        pool = list(samples) if route_train == 'all' else buckets[rc]
        try:
            fold_idx = partition_folds(pool, folds, seed)
        except InvalidArgument as e:
            log.warning(f'{rc.value}: {e}; no models trained')
            continue
        layers, units = TOPOLOGIES[profile][rc]
        topology = MlpTopology(input_dim, layers, units, activation=activation)
        for f, val_idx in enumerate(fold_idx):
            val_set = set(val_idx)
            train_set = [pool[i] for i in range(len(pool)) if i not in val_set]
            valid = [pool[i] for i in val_idx]
            for r in range(REPLICAS[profile]):
                job_cfg = replace(cfg, rng_seed=_job_seed(seed, rc, f, r))
                work[(rc, f, r)] = (train_set, valid, topology, job_cfg, f'{rc.value}/fold{f}/r{r}')

    results = {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as ex:
        futures = {ex.submit(train, *args): key for key, args in work.items()}
        for fut in as_completed(futures):
            key = futures[fut]
            model, _ = fut.result()
            results[key] = model

    models = {}
    for rc in RangeClass.ordered():
        keys = sorted(k for k in results if k[0] is rc)
        if keys:
            models[rc] = tuple(results[k] for k in keys)
    log.info('trained ' + ', '.join(f'{rc.value}={len(m)}' for rc, m in models.items()))
    return RangeEnsemble(split, models, profile)


def predict_model(model: MlpModel, features) -> np.ndarray:
    return model.predict(features)


def predict(e: RangeEnsemble, features, last_frame_area: float) -> np.ndarray:
    """Mean (vx, vy, px, py) of the routed range's models."""
    rc = classify_range_by_area(last_frame_area, e.split)
    models = e.models.get(rc)
    if not models:
        raise MissingModel(rc)
    outputs = np.stack([predict_model(m, features) for m in models])
    return outputs.mean(axis=0)


# ─── Files ───────────────────────────────────────────────────────────────────

def _model_name(rc: RangeClass, fold: int, replica: int, profile: str) -> str:
    if REPLICAS.get(profile, 1) > 1:
        return f'{rc.value}_fold{fold}_seed{replica}.json'
    return f'{rc.value}_fold{fold}.json'


def save_ensemble(directory, e: RangeEnsemble) -> Path:
    directory = Path(directory)
    replicas = REPLICAS.get(e.profile, 1)
    ranges = {}
    for rc in RangeClass.ordered():
        names = []
        for n, model in enumerate(e.models.get(rc, ())):
            name = _model_name(rc, n // replicas, n % replicas, e.profile)
            save_model(directory / name, model)
            names.append(name)
        ranges[rc.value] = names
    manifest = directory / MANIFEST_NAME
    write_json(manifest, {'split': e.split.to_dict(), 'ranges': ranges, 'profile': e.profile,
                          'layout_version': e.layout_version})
    return manifest


def load_ensemble(path) -> RangeEnsemble:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    data = read_json(path)
    split = AreaSplitConfig.from_dict(data['split'])
    models = {}
    for rc in RangeClass.ordered():
        names = data.get('ranges', {}).get(rc.value, [])
        if names:
            models[rc] = tuple(load_model(path.parent / n) for n in names)
    return RangeEnsemble(split, models, data.get('profile', 'full'))
