"""
Deterministic synthetic dash-cam clips.

Vehicles are fronto-parallel textured billboards moving at constant velocity
in front of a pinhole camera mounted CAMERA_HEIGHT metres above a flat road.
Axes: X lateral (right positive), Z longitudinal (ahead positive); the
dataset's (x, y) velocity and position are (X, Z).
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import get_logger
from dataset import INDEX_NAME, MANIFEST_NAME, manifest_payload, read_json, save_frame, write_json
from geometry import (BoundingBox, ImageFrame, InvalidArgument, RangeClass, VehicleAnnotation,
                      VideoSequence, sample_bilinear, vehicle_id_for)

log = get_logger('Synth')

CAMERA_HEIGHT = 1.5
BACKGROUND_RANGE = (0.0, 0.45)
VEHICLE_RANGE = (0.55, 1.0)
CONTRAST_FLOOR = 0.2
OCCLUDER_MARGIN = 16
TEXTURE_SHAPE = (12, 16)
AXES = {'x': 'lateral', 'y': 'longitudinal'}

DEFAULT_PROFILE = (0.12, 0.65, 0.23)
DISTANCE_BANDS = {RangeClass.NEAR: (8.0, 20.0), RangeClass.MEDIUM: (20.0, 45.0), RangeClass.FAR: (45.0, 80.0)}
MIN_DEPTH = 6.0


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    cx: float
    cy: float

    def __post_init__(self):
        if not self.f > 0:
            raise InvalidArgument(f'focal length must be > 0, got {self.f}')

    @classmethod
    def for_image(cls, width: int, height: int):
        return cls(f=0.9375 * width, cx=width / 2.0, cy=height / 2.0)

    def to_dict(self):
        return {'f': self.f, 'cx': self.cx, 'cy': self.cy}


@dataclass(frozen=True)
class VehicleState:
    X: float
    Z: float
    width: float
    height: float


def project_vehicle(state: VehicleState, intrinsics: CameraIntrinsics) -> BoundingBox:
    """Pinhole box of a billboard standing on the road; never clamped."""
    if not state.Z > 0:
        raise InvalidArgument(f'vehicle must be in front of the camera, got Z={state.Z}')
    Y = CAMERA_HEIGHT - state.height / 2.0
    f = intrinsics.f
    return BoundingBox.from_center(intrinsics.cx + f * state.X / state.Z,
                                   intrinsics.cy + f * Y / state.Z,
                                   f * state.width / state.Z,
                                   f * state.height / state.Z)


def pinhole_velocity(boxes: Sequence[BoundingBox], intrinsics: CameraIntrinsics, fps: float,
                     vehicle_width: float = 1.8) -> Tuple[float, float]:
    """
    (vx, vz) read straight off a box sequence, assuming every vehicle is
    vehicle_width metres wide: depth from box width, lateral offset from the
    box centre, velocity from a least-squares line through each over time.
    """
    if len(boxes) < 2:
        raise InvalidArgument(f'need at least 2 boxes, got {len(boxes)}')
    if not fps > 0:
        raise InvalidArgument(f'fps must be > 0, got {fps}')
    f = intrinsics.f
    widths = np.array([b.w for b in boxes], dtype=np.float64)
    if np.any(widths <= 0):
        raise InvalidArgument('boxes must have positive width')
    Z = f * vehicle_width / widths
    X = (np.array([b.center[0] for b in boxes]) - intrinsics.cx) * Z / f
    t = np.arange(len(boxes)) / fps
    return float(np.polyfit(t, X, 1)[0]), float(np.polyfit(t, Z, 1)[0])


# ─── Scene ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class VehicleSpec:
    X: float
    Z: float
    vx: float
    vz: float
    width: float = 1.8
    height: float = 1.5
    texture_seed: int = 0

    def state_at(self, t: float) -> VehicleState:
        return VehicleState(self.X + self.vx * t, self.Z + self.vz * t, self.width, self.height)


@dataclass(frozen=True)
class OccluderSpec:
    start_frame: int
    end_frame: int
    vehicle: int = 0
    intensity: float = 0.5


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    vehicles: Tuple[VehicleSpec, ...]
    fps: float = 20.0
    frames: int = 40
    seed: int = 0
    background_seed: int = 0
    occluder: Optional[OccluderSpec] = None
    intrinsics: Optional[CameraIntrinsics] = None

    def __post_init__(self):
        object.__setattr__(self, 'vehicles', tuple(self.vehicles))
        if self.intrinsics is None:
            object.__setattr__(self, 'intrinsics', CameraIntrinsics.for_image(self.width, self.height))
        if self.width < 1 or self.height < 1:
            raise InvalidArgument(f'image size must be positive, got {self.width}x{self.height}')
        if self.frames < 2:
            raise InvalidArgument(f'a clip needs at least 2 frames, got {self.frames}')
        if not self.fps > 0:
            raise InvalidArgument(f'fps must be > 0, got {self.fps}')
        end = (self.frames - 1) / self.fps
        for i, v in enumerate(self.vehicles):
            if min(v.Z, v.Z + v.vz * end) <= 0:
                raise InvalidArgument(f'vehicle {i} leaves Z > 0 during the clip')
        if self.occluder is not None and not 0 <= self.occluder.vehicle < len(self.vehicles):
            raise InvalidArgument(f'occluder targets missing vehicle {self.occluder.vehicle}')

    def time(self, frame: int) -> float:
        return frame / self.fps


@dataclass(frozen=True)
class VehicleTruth:
    boxes: Tuple[BoundingBox, ...]
    velocity: Tuple[float, float]
    position: Tuple[float, float]
    positions: Tuple[Tuple[float, float], ...] = field(repr=False, default=())

    @property
    def distance(self) -> float:
        return math.hypot(*self.position)

    def annotation(self, vehicle_id='') -> VehicleAnnotation:
        return VehicleAnnotation(self.boxes[-1], self.velocity, self.position, vehicle_id)


@dataclass(frozen=True)
class SyntheticGroundTruth:
    vehicles: Tuple[VehicleTruth, ...]

    def to_dict(self, sequence_id: str):
        return {
            'sequence_id': sequence_id,
            'vehicles': [{
                'vehicle_id': vehicle_id_for(sequence_id, i),
                'boxes': [b.to_list() for b in v.boxes],
                'velocity': list(v.velocity),
                'position': list(v.position),
                'distance': v.distance,
            } for i, v in enumerate(self.vehicles)],
        }


# ─── Textures & compositing ──────────────────────────────────────────────────

def _octave(rng: np.random.Generator, width: int, height: int, cell: int) -> np.ndarray:
    coarse = rng.random((height // cell + 2, width // cell + 2))
    return ndimage.zoom(coarse, cell, order=1)[:height, :width]


def background_texture(width: int, height: int, seed: int) -> np.ndarray:
    """Two-octave value noise stretched onto BACKGROUND_RANGE."""
    rng = np.random.default_rng(seed)
    noise = 0.6 * _octave(rng, width, height, 8) + 0.4 * _octave(rng, width, height, 3)
    lo, hi = BACKGROUND_RANGE
    span = np.ptp(noise)
    norm = (noise - noise.min()) / span if span > 0 else np.zeros_like(noise)
    return lo + (hi - lo) * norm


def vehicle_texture(seed: int) -> np.ndarray:
    lo, hi = VEHICLE_RANGE
    return lo + (hi - lo) * np.random.default_rng(seed).random(TEXTURE_SHAPE)


def _span(lo: float, hi: float, limit: int):
    return max(0, int(math.floor(lo))), min(limit, int(math.ceil(hi)))


def _coverage(start: int, stop: int, lo: float, hi: float) -> np.ndarray:
    cells = np.arange(start, stop, dtype=np.float64)
    return np.clip(np.minimum(cells + 1.0, hi) - np.maximum(cells, lo), 0.0, 1.0)


def composite(canvas: np.ndarray, box: BoundingBox, texture: np.ndarray):
    """Alpha-blend texture stretched over box; partial pixels by area coverage."""
    height, width = canvas.shape
    j0, j1 = _span(box.x, box.x + box.w, width)
    i0, i1 = _span(box.y, box.y + box.h, height)
    if j1 <= j0 or i1 <= i0:
        return
    alpha = np.outer(_coverage(i0, i1, box.y, box.y + box.h), _coverage(j0, j1, box.x, box.x + box.w))
    th, tw = texture.shape
    u = (np.arange(j0, j1) + 0.5 - box.x) / box.w * tw
    v = (np.arange(i0, i1) + 0.5 - box.y) / box.h * th
    gu, gv = np.meshgrid(u, v)
    tex = sample_bilinear(texture, gu, gv)
    region = canvas[i0:i1, j0:j1]
    canvas[i0:i1, j0:j1] = (1.0 - alpha) * region + alpha * tex


def _fill(canvas: np.ndarray, box: BoundingBox, value: float):
    height, width = canvas.shape
    j0, j1 = _span(box.x, box.x + box.w, width)
    i0, i1 = _span(box.y, box.y + box.h, height)
    canvas[i0:i1, j0:j1] = value


def vehicle_contrast(frame: ImageFrame, box: BoundingBox, background: np.ndarray) -> float:
    """|mean rendered - mean background| over the fully covered pixels of box."""
    j0, j1 = int(math.ceil(box.x)), int(math.floor(box.x + box.w))
    i0, i1 = int(math.ceil(box.y)), int(math.floor(box.y + box.h))
    j0, i0 = max(j0, 0), max(i0, 0)
    j1, i1 = min(j1, frame.width), min(i1, frame.height)
    if j1 <= j0 or i1 <= i0:
        return math.inf
    rendered = frame.intensity[i0:i1, j0:j1].mean()
    return float(abs(rendered - background[i0:i1, j0:j1].mean()))


def render_sequence(spec: SceneSpec, sequence_id: str = '', drive_id: str = ''):
    """Frames plus exact per-frame boxes for every vehicle."""
    background = background_texture(spec.width, spec.height, spec.background_seed)
    textures = [vehicle_texture(v.texture_seed) for v in spec.vehicles]
    boxes: List[List[BoundingBox]] = [[] for _ in spec.vehicles]
    positions: List[List[Tuple[float, float]]] = [[] for _ in spec.vehicles]
    frames = []
    for t in range(spec.frames):
        canvas = background.copy()
        states = [v.state_at(spec.time(t)) for v in spec.vehicles]
        for k, s in enumerate(states):
            boxes[k].append(project_vehicle(s, spec.intrinsics))
            positions[k].append((s.X, s.Z))
        for k in sorted(range(len(states)), key=lambda k: -states[k].Z):
            composite(canvas, boxes[k][-1], textures[k])
        occ = spec.occluder
        if occ is not None and occ.start_frame <= t < occ.end_frame:
            b = boxes[occ.vehicle][-1]
            m = OCCLUDER_MARGIN
            _fill(canvas, BoundingBox(b.x - m, b.y - m, b.w + 2 * m, b.h + 2 * m), occ.intensity)
        frames.append(ImageFrame(np.clip(canvas, 0.0, 1.0)))

    last = frames[-1]
    for k, b in enumerate(boxes):
        contrast = vehicle_contrast(last, b[-1], background)
        if contrast < CONTRAST_FLOOR:
            raise InvalidArgument(f'vehicle {k} contrast {contrast:.3f} below {CONTRAST_FLOOR}')

    truths = tuple(VehicleTruth(boxes=tuple(boxes[k]), velocity=(v.vx, v.vz), position=positions[k][-1],
                                positions=tuple(positions[k]))
                   for k, v in enumerate(spec.vehicles))
    seq = VideoSequence(tuple(frames), fps=spec.fps, sequence_id=sequence_id, drive_id=drive_id)
    return seq, SyntheticGroundTruth(truths)


# ─── Datasets ────────────────────────────────────────────────────────────────

def stratified_counts(n: int, profile: Sequence[float]) -> List[int]:
    """Largest-remainder split of n into len(profile) groups."""
    weights = np.asarray(profile, dtype=np.float64)
    if weights.size == 0 or np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidArgument(f'bad distance profile {list(profile)}')
    quota = n * weights / weights.sum()
    counts = np.floor(quota).astype(int)
    order = sorted(range(len(quota)), key=lambda i: (-(quota[i] - counts[i]), i))
    for i in order[:n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _boxes_inside(spec: SceneSpec, v: VehicleSpec) -> bool:
    for t in range(spec.frames):
        s = v.state_at(spec.time(t))
        if s.Z < MIN_DEPTH:
            return False
        b = project_vehicle(s, spec.intrinsics)
        if b.x < 0 or b.y < 0 or b.x + b.w > spec.width or b.y + b.h > spec.height:
            return False
    return True


def sample_vehicle(rng: np.random.Generator, rc: RangeClass, width: int, height: int,
                   frames: int, fps: float, texture_seed: int, tries: int = 200) -> VehicleSpec:
    """Constant-velocity vehicle whose last-frame distance lies in rc's band."""
    intrinsics = CameraIntrinsics.for_image(width, height)
    probe = SceneSpec(width, height, (), fps=fps, frames=frames)
    lo, hi = DISTANCE_BANDS[rc]
    end = (frames - 1) / fps
    lateral = 0.6 * intrinsics.cx / intrinsics.f
    for _ in range(tries):
        d = rng.uniform(lo, hi)
        X = rng.uniform(-1.0, 1.0) * min(3.5, lateral * d)
        Z = math.sqrt(d * d - X * X)
        vx = rng.uniform(-1.5, 1.5)
        vz = rng.uniform(-6.0, 4.0)
        v = VehicleSpec(X - vx * end, Z - vz * end, vx, vz,
                        width=rng.uniform(1.6, 2.0), height=rng.uniform(1.3, 1.7),
                        texture_seed=texture_seed)
        if _boxes_inside(probe, v):
            return v
    raise InvalidArgument(f'could not place a {rc.value} vehicle in a {width}x{height} frame')


def _write_sequence(out: Path, spec: SceneSpec, sequence_id: str, drive_id: str) -> str:
    seq, truth = render_sequence(spec, sequence_id, drive_id)
    seq_dir = out / sequence_id
    names = []
    for t, frame in enumerate(seq.frames):
        name = f'frame_{t:04d}.pgm'
        save_frame(frame, seq_dir / name)
        names.append(name)
    annotations = [v.annotation(vehicle_id_for(sequence_id, k)) for k, v in enumerate(truth.vehicles)]
    write_json(seq_dir / MANIFEST_NAME,
               manifest_payload(sequence_id, drive_id, spec.fps, names, annotations, axes=AXES))
    write_json(seq_dir / 'truth.json', truth.to_dict(sequence_id))
    return f'{sequence_id}/{MANIFEST_NAME}'


def generate_dataset(out_dir, n: int, seed: int = 0, profile: Sequence[float] = DEFAULT_PROFILE,
                     width: int = 640, height: int = 360, frames: int = 40, fps: float = 20.0,
                     sequences_per_drive: int = 4, jobs: int = 1) -> Path:
    """Writes one directory per clip plus a dataset.json index; returns the index path."""
    if n < 1:
        raise InvalidArgument(f'need at least one sequence, got {n}')
    if sequences_per_drive < 1:
        raise InvalidArgument(f'sequences_per_drive must be >= 1, got {sequences_per_drive}')
    out = Path(out_dir)
    counts = stratified_counts(n, profile)
    classes = [rc for rc, c in zip(RangeClass.ordered(), counts) for _ in range(c)]
    classes = [classes[i] for i in np.random.default_rng(seed).permutation(n)]

    specs = []
    for i, rc in enumerate(classes):
        rng = np.random.default_rng([seed, i])
        drive = i // sequences_per_drive
        vehicle = sample_vehicle(rng, rc, width, height, frames, fps, texture_seed=int(rng.integers(2 ** 31)))
        spec = SceneSpec(width, height, (vehicle,), fps=fps, frames=frames, seed=seed,
                         background_seed=int(np.random.SeedSequence([seed, 1_000_000 + drive]).generate_state(1)[0]))
        specs.append((spec, f'seq{i:04d}', f'drive{drive:03d}'))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as ex:
        futures = [ex.submit(_write_sequence, out, *job) for job in specs]
        relative = [f.result() for f in futures]

    index = out / INDEX_NAME
    write_json(index, {
        'sequences': relative,
        'seed': seed,
        'profile': list(profile),
        'image_size': [width, height],
        'intrinsics': CameraIntrinsics.for_image(width, height).to_dict(),
        'axes': AXES,
    })
    log.info(f'{n} sequences ({", ".join(f"{rc.value}={c}" for rc, c in zip(RangeClass.ordered(), counts))}) → {out}')
    return index


def load_truth(path) -> dict:
    """truth.json → vehicle_id → list of per-frame boxes."""
    data = read_json(path)
    return {v['vehicle_id']: [BoundingBox.from_list(b) for b in v['boxes']] for v in data['vehicles']}
