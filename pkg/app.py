# app.py — Dash-cam velocity estimation
# encoding: utf-8
"""
Command-line pipeline:

    synth → track → extract-features → calibrate-split → train → predict → evaluate

plus check-grad and bench. Exit status 0 on success, 1 on validation errors,
2 on I/O errors. Diagnostics go to stderr; results go to files.
"""

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import replace
from pathlib import Path

import numpy as np

from bench import STAGES, run_bench
from config import (AreaSplitConfig, ROUTE_TRAIN, PROFILES, PipelineConfig, get_logger,
                    load_pipeline_config, set_log_level)
from cues import assemble_features, load_depth_sequence, load_features, load_flow_sequence, save_features
from dataset import (annotations_by_vehicle, frame_size, load_dataset, load_frame, read_json, write_json)
from decorators import exit_gate, timed
from ensemble import (calibrate_area_thresholds, holdout_by_drive, load_ensemble, predict,
                      save_ensemble, train_ensemble)
from evaluation import Prediction, evaluate_dataset, load_predictions, save_predictions
from geometry import InvalidArgument, VelocityError
from regressor import ACTIVATIONS, MlpTopology, Sample, check_gradients
from synthcam import DEFAULT_PROFILE, generate_dataset, load_truth
from tracker import load_tracks, save_tracks, track_iou, track_vehicle

log = get_logger('CLI')

GRADCHECK_LIMITS = {64: 1e-6, 32: 1e-3}
GRADCHECK_EPS = {64: 1e-5, 32: 1e-3}
IOU_GOOD = 0.8


def _pipeline(args) -> PipelineConfig:
    """Config file over env defaults, then flags over both."""
    cfg = load_pipeline_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, rng_seed=args.seed))
    if args.jobs is not None:
        cfg = replace(cfg, jobs=args.jobs)
    return cfg


def _floats(text: str, count: int, name: str):
    try:
        values = [float(v) for v in text.split(',')]
    except ValueError:
        raise InvalidArgument(f'{name} must be {count} comma-separated numbers, got {text!r}')
    if len(values) != count:
        raise InvalidArgument(f'{name} must be {count} comma-separated numbers, got {text!r}')
    return values


# ─── synth ───────────────────────────────────────────────────────────────────

@exit_gate('Synth')
def cmd_synth(args):
    cfg = _pipeline(args)
    profile = _floats(args.profile, 3, '--profile') if args.profile else DEFAULT_PROFILE
    generate_dataset(args.out_dir, args.n, seed=cfg.seed, profile=profile, width=args.width,
                     height=args.height, frames=args.frames, fps=args.fps,
                     sequences_per_drive=args.sequences_per_drive, jobs=cfg.jobs)


# ─── track ───────────────────────────────────────────────────────────────────

@timed('Track')
def _track_record(rec, tracker_cfg):
    seq = rec.load_sequence()
    return [track_vehicle(seq, ann.last_frame_box, tracker_cfg, vehicle_id=ann.vehicle_id)
            for ann in rec.annotations]


def _report_iou(records, tracks):
    for rec in records:
        truth_path = rec.path.parent / 'truth.json'
        truth = load_truth(truth_path)
        for ann in rec.annotations:
            if ann.vehicle_id not in truth:
                raise InvalidArgument(f'{truth_path}: no ground truth for {ann.vehicle_id}')
            ious = np.array(track_iou(tracks[ann.vehicle_id], truth[ann.vehicle_id]))
            log.info(f'{ann.vehicle_id} mean IoU={ious.mean():.3f} '
                     f'frames>={IOU_GOOD}: {np.mean(ious >= IOU_GOOD):.0%}')


def _save_overlays(records, tracks, out_dir):
    from plots import save_track_overlay
    for rec in records:
        for ann in rec.annotations:
            track = tracks[ann.vehicle_id]
            for index in (0, len(track) - 1):
                frame = load_frame(rec.frame_files[index])
                name = f'{ann.vehicle_id.replace(":", "_")}_{index:04d}.png'
                save_track_overlay(frame, track, index, Path(out_dir) / name)


@exit_gate('Track')
def cmd_track(args):
    cfg = _pipeline(args)
    records = load_dataset(args.data)
    results = {}
    with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
        futures = {ex.submit(_track_record, rec, cfg.tracker): rec.sequence_id for rec in records}
        for f in as_completed(futures):
            results[futures[f]] = f.result()
    ordered = [t for rec in records for t in results[rec.sequence_id]]
    save_tracks(args.out, ordered)
    log.info(f'{len(ordered)} tracks → {args.out}')

    tracks = {t.vehicle_id: t for t in ordered}
    if args.truth:
        _report_iou(records, tracks)
    if args.overlays:
        _save_overlays(records, tracks, args.overlays)


# ─── extract-features ────────────────────────────────────────────────────────

def _features_for(rec, tracks, features_cfg, flow_dir, depth_dir):
    width, height = frame_size(rec)
    fcfg = replace(features_cfg, image_width=width, image_height=height)
    n = len(rec)
    flow = depth = None
    if fcfg.include_flow:
        if not flow_dir:
            raise InvalidArgument('flow channel needs --flow-dir')
        flow = load_flow_sequence(flow_dir, rec.sequence_id, n)
    if fcfg.include_depth:
        if not depth_dir:
            raise InvalidArgument('depth channel needs --depth-dir')
        depth = load_depth_sequence(depth_dir, rec.sequence_id, n)
    out = []
    for ann in rec.annotations:
        track = tracks.get(ann.vehicle_id)
        if track is None:
            raise InvalidArgument(f'no track for {ann.vehicle_id}')
        if len(track) != n:
            raise InvalidArgument(f'{ann.vehicle_id}: track has {len(track)} boxes for {n} frames')
        fv = assemble_features(track, flow, depth, fcfg, vehicle_id=ann.vehicle_id)
        out.append(replace(fv, sequence_id=rec.sequence_id, drive_id=rec.drive_id))
    return out


@exit_gate('Features')
def cmd_extract_features(args):
    cfg = _pipeline(args)
    features_cfg = cfg.features
    if args.channels:
        features_cfg = features_cfg.with_channels([c.strip() for c in args.channels.split(',') if c.strip()])
    if args.frame_skip:
        features_cfg = replace(features_cfg, frame_skip=args.frame_skip)
    records = load_dataset(args.data)
    tracks = load_tracks(args.tracks)
    results = {}
    with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
        futures = {ex.submit(_features_for, rec, tracks, features_cfg, args.flow_dir, args.depth_dir): rec.sequence_id
                   for rec in records}
        for f in as_completed(futures):
            results[futures[f]] = f.result()
    vectors = [v for rec in records for v in results[rec.sequence_id]]
    save_features(args.out, vectors)
    log.info(f'{len(vectors)} feature vectors ({vectors[0].layout_version if vectors else "-"}) → {args.out}')


# ─── calibrate-split ─────────────────────────────────────────────────────────

@exit_gate('Split')
def cmd_calibrate_split(args):
    records = load_dataset(args.data)
    anns = [a for rec in records for a in rec.annotations if a.position is not None]
    split = calibrate_area_thresholds([a.last_frame_box.area for a in anns], [a.distance for a in anns])
    write_json(args.out, split.to_dict())


# ─── train ───────────────────────────────────────────────────────────────────

def build_samples(vectors, annotations) -> list:
    """Join feature vectors with their ground truth; every vector needs a labelled vehicle."""
    samples, missing = [], []
    for v in vectors:
        entry = annotations.get(v.vehicle_id)
        if entry is None or not entry[1].has_truth:
            missing.append(v.vehicle_id)
            continue
        rec, ann = entry
        samples.append(Sample(features=v.values, targets=(*ann.velocity, *ann.position),
                              layout_version=v.layout_version, vehicle_id=v.vehicle_id,
                              drive_id=v.drive_id or rec.drive_id, distance=ann.distance,
                              last_frame_area=ann.last_frame_box.area))
    if missing:
        raise InvalidArgument(f'no ground truth for {missing}')
    return samples


def _resolve_split(args, cfg, samples) -> AreaSplitConfig:
    if args.split:
        return AreaSplitConfig.from_dict(read_json(args.split))
    if isinstance(cfg.split, AreaSplitConfig):
        return cfg.split
    return calibrate_area_thresholds([s.last_frame_area for s in samples], [s.distance for s in samples])


def _predict_samples(e, samples):
    out = {}
    for s in samples:
        y = predict(e, s.features, s.last_frame_area)
        out[s.vehicle_id] = Prediction(s.vehicle_id, (float(y[0]), float(y[1])), (float(y[2]), float(y[3])))
    return out


@exit_gate('Train')
def cmd_train(args):
    cfg = _pipeline(args)
    profile = args.profile or cfg.profile
    route = args.route_train or cfg.route_train
    annotations = annotations_by_vehicle(load_dataset(args.data))
    samples = build_samples(load_features(args.features), annotations)

    held, proportions = [], None
    if args.holdout:
        samples, held, proportions = holdout_by_drive(samples, args.holdout, cfg.seed)
        log.info(f'holdout {len(held)} vehicles, ranges {proportions}')

    split = _resolve_split(args, cfg, samples)
    e = train_ensemble(samples, split, cfg.train, profile=profile, route_train=route, seed=cfg.seed,
                       jobs=cfg.jobs, activation=args.activation)
    out = Path(args.out_dir)
    save_ensemble(out, e)
    write_json(out / 'split.json', split.to_dict())
    write_json(out / 'pipeline.json', replace(cfg, split=split, profile=profile, route_train=route).to_dict())

    if held:
        report = evaluate_dataset(_predict_samples(e, held), [annotations[s.vehicle_id][1] for s in held])
        write_json(out / 'holdout_report.json', {**report.to_dict(), 'proportions': proportions})
        log.info(f'holdout {report.summary()}')


# ─── predict / evaluate ──────────────────────────────────────────────────────

@exit_gate('Predict')
def cmd_predict(args):
    e = load_ensemble(args.model)
    vectors = load_features(args.features)
    predictions = []
    for v in vectors:
        if e.layout_version and v.layout_version != e.layout_version:
            raise InvalidArgument(f'{v.vehicle_id}: layout {v.layout_version!r} but model expects {e.layout_version!r}')
        if v.last_frame_area is None:
            raise InvalidArgument(f'{v.vehicle_id}: feature record lacks last_frame_area')
        y = predict(e, v.values, v.last_frame_area)
        predictions.append(Prediction(v.vehicle_id, (float(y[0]), float(y[1])), (float(y[2]), float(y[3]))))
    save_predictions(args.out, predictions)
    log.info(f'{len(predictions)} predictions → {args.out}')


@exit_gate('Eval')
def cmd_evaluate(args):
    records = load_dataset(args.data)
    annotations = [a for rec in records for a in rec.annotations]
    report = evaluate_dataset(load_predictions(args.predictions), annotations)
    write_json(args.out, report.to_dict())
    log.info(report.summary())
    if args.plot:
        from plots import save_range_bars
        save_range_bars(report, args.plot)


# ─── check-grad / bench ──────────────────────────────────────────────────────

@exit_gate('GradCheck')
def cmd_check_grad(args):
    cfg = _pipeline(args)
    dtype = np.float32 if args.bits == 32 else np.float64
    eps = args.eps or GRADCHECK_EPS[args.bits]
    rng = np.random.default_rng(cfg.seed)
    worst, skipped = 0.0, 0
    for _ in range(args.trials):
        topology = MlpTopology(int(rng.integers(2, 9)), int(rng.integers(1, 4)), int(rng.integers(2, 9)),
                               activation=args.activation)
        err, skip = check_gradients(topology, int(rng.integers(2 ** 31)), eps=eps, dtype=dtype)
        worst, skipped = max(worst, err), skipped + skip
    print(f'max relative error: {worst:.3e} ({args.trials} networks, {args.bits}-bit, '
          f'{skipped} kink components skipped)')
    limit = GRADCHECK_LIMITS[args.bits]
    if worst >= limit:
        raise VelocityError(f'gradient check failed: {worst:.3e} >= {limit:.0e}')


@exit_gate('Bench')
def cmd_bench(args):
    results = run_bench(args.stage, args.repeats)
    for key, value in results.items():
        if key.endswith('_ms'):
            print(f'{key[:-3]:<10} {value:8.3f} ms')
    if args.out:
        write_json(args.out, results)


# ─── Parser ──────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='pipeline config JSON (version 1)')
    common.add_argument('--seed', type=int, default=None, help='overrides config and VELOCITY_SEED')
    common.add_argument('--jobs', type=int, default=None, help='worker threads (VELOCITY_JOBS)')
    common.add_argument('-v', '--verbose', action='store_true', help='debug logging')

    parser = argparse.ArgumentParser(prog='velocity', description='Monocular dash-cam vehicle velocity estimation')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='generate a synthetic dataset')
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--profile', help='near,medium,far proportions (default 0.12,0.65,0.23)')
    p.add_argument('--out-dir', required=True)
    p.add_argument('--width', type=int, default=640)
    p.add_argument('--height', type=int, default=360)
    p.add_argument('--frames', type=int, default=40)
    p.add_argument('--fps', type=float, default=20.0)
    p.add_argument('--sequences-per-drive', type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('track', parents=[common], help='track every annotated vehicle backwards')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--truth', action='store_true', help='score against truth.json sidecars')
    p.add_argument('--overlays', help='directory for first/last frame overlay PNGs')
    p.set_defaults(func=cmd_track)

    p = sub.add_parser('extract-features', parents=[common], help='aggregate cues into feature vectors')
    p.add_argument('--data', required=True)
    p.add_argument('--tracks', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--channels', help='comma list of track,flow,depth')
    p.add_argument('--frame-skip', type=int)
    p.add_argument('--flow-dir')
    p.add_argument('--depth-dir')
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser('calibrate-split', parents=[common], help='fit near/far area thresholds')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_calibrate_split)

    p = sub.add_parser('train', parents=[common], help='train the range ensemble')
    p.add_argument('--data', required=True)
    p.add_argument('--features', required=True)
    p.add_argument('--out-dir', required=True)
    p.add_argument('--split', help='split JSON from calibrate-split')
    p.add_argument('--profile', choices=PROFILES)
    p.add_argument('--route-train', choices=ROUTE_TRAIN)
    p.add_argument('--activation', choices=ACTIVATIONS, default='crelu')
    p.add_argument('--holdout', type=float, help='fraction of drives to withhold and report on')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('predict', parents=[common], help='predict velocities')
    p.add_argument('--model', required=True, help='ensemble directory or ensemble.json')
    p.add_argument('--features', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser('evaluate', parents=[common], help='score predictions per range')
    p.add_argument('--data', required=True)
    p.add_argument('--predictions', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--plot', help='bar chart SVG path')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('check-grad', parents=[common], help='finite-difference gradient oracle')
    p.add_argument('--bits', type=int, choices=(32, 64), default=64)
    p.add_argument('--trials', type=int, default=100)
    p.add_argument('--eps', type=float)
    p.add_argument('--activation', choices=ACTIVATIONS, default='crelu')
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser('bench', parents=[common], help='stage timings')
    p.add_argument('stage', nargs='?', choices=STAGES + ('all',), default='all')
    p.add_argument('--repeats', type=int, default=0)
    p.add_argument('--out')
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_log_level('DEBUG')
    return args.func(args)


if __name__ == '__main__':
    sys.exit(main())
