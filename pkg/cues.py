# cues.py — Dash-cam velocity estimation
# encoding: utf-8
"""
Dense depth/flow cues aggregated inside tracked boxes, smoothed over time and
laid out as one feature vector per vehicle.

Feature layout (sampled frames run last, last-skip, last-2*skip, ... >= 0):
    per frame: [cx/W, cy/H, w/W, h/H] (track) + [u, v] (flow) + [depth]
    then:      last-frame box area / (W*H) (track)
Absent channels are omitted, never zero-filled.
"""

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import FeatureConfig, get_logger
from dataset import read_json, write_bytes, write_json
from geometry import (BoundingBox, FormatError, InvalidArgument, UnsupportedFormat,
                      sample_bilinear, shrink_box)

log = get_logger('Cues')

FLO_MAGIC = 202021.25
FLOW_NAME = 'flow_{:04d}.flo'
DEPTH_NAME = 'disp_{:04d}.pfm'
LAYOUT_PREFIX = 'v1'
CHANNELS = ('u', 'v', 'depth')


# ─── Maps ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DenseMap:
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        grid = np.asarray(self.values)
        if grid.ndim != 2 or grid.size == 0:
            raise InvalidArgument(f'dense map needs a non-empty 2-D grid, got shape {grid.shape}')
        if not np.all(np.isfinite(grid)):
            raise InvalidArgument('dense map values must be finite')
        object.__setattr__(self, 'values', grid)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def __repr__(self):
        return f'<DenseMap {self.width}x{self.height}>'


@dataclass(frozen=True)
class FlowField:
    u: DenseMap
    v: DenseMap

    def __post_init__(self):
        if self.u.values.shape != self.v.values.shape:
            raise InvalidArgument('flow components must share one shape')


# ─── .flo ────────────────────────────────────────────────────────────────────

def decode_flow(data: bytes, where='<bytes>') -> FlowField:
    if len(data) < 12:
        raise FormatError(f'{where}: truncated header at byte {len(data)} (need 12)')
    magic = float(np.frombuffer(data, dtype='<f4', count=1)[0])
    if magic != FLO_MAGIC:
        raise FormatError(f'{where}: bad .flo magic {magic!r}')
    width, height = (int(v) for v in np.frombuffer(data, dtype='<i4', count=2, offset=4))
    if width < 0 or height < 0:
        raise FormatError(f'{where}: negative dimensions {width}x{height}')
    need = 12 + width * height * 8
    if len(data) < need:
        raise FormatError(f'{where}: truncated payload at byte {len(data)} (need {need})')
    grid = np.frombuffer(data, dtype='<f4', count=width * height * 2, offset=12).reshape(height, width, 2)
    if not np.all(np.isfinite(grid)):
        raise FormatError(f'{where}: non-finite flow values')
    return FlowField(DenseMap(grid[..., 0].astype(np.float32)), DenseMap(grid[..., 1].astype(np.float32)))


def encode_flow(flow: FlowField) -> bytes:
    h, w = flow.u.values.shape
    grid = np.empty((h, w, 2), dtype='<f4')
    grid[..., 0] = flow.u.values
    grid[..., 1] = flow.v.values
    header = np.array([FLO_MAGIC], dtype='<f4').tobytes() + np.array([w, h], dtype='<i4').tobytes()
    return header + grid.tobytes()


def load_flow_field(path) -> Tuple[DenseMap, DenseMap]:
    with open(path, 'rb') as f:
        flow = decode_flow(f.read(), str(path))
    return flow.u, flow.v


def save_flow_field(path, u: DenseMap, v: DenseMap):
    write_bytes(path, encode_flow(FlowField(u, v)))


# ─── PFM ─────────────────────────────────────────────────────────────────────

def _header_line(stream, where) -> str:
    line = stream.readline()
    if not line:
        raise FormatError(f'{where}: truncated PFM header')
    try:
        return line.decode('ascii').strip()
    except UnicodeDecodeError as e:
        raise FormatError(f'{where}: PFM header is not ASCII') from e


def decode_pfm(data: bytes, where='<bytes>') -> DenseMap:
    """Grayscale PFM; rows are stored bottom-up and returned top-down."""
    stream = io.BytesIO(data)
    kind = _header_line(stream, where)
    if kind == 'PF':
        raise UnsupportedFormat(f'{where}: colour PFM is not supported')
    if kind != 'Pf':
        raise FormatError(f'{where}: bad PFM header {kind!r}')
    dims = _header_line(stream, where).split()
    try:
        width, height = int(dims[0]), int(dims[1])
        scale = float(_header_line(stream, where))
    except (IndexError, ValueError) as e:
        raise FormatError(f'{where}: bad PFM dimensions or scale') from e
    if width < 0 or height < 0:
        raise FormatError(f'{where}: negative dimensions {width}x{height}')
    if scale == 0:
        raise FormatError(f'{where}: PFM scale must be non-zero')
    offset = stream.tell()
    need = offset + width * height * 4
    if len(data) < need:
        raise FormatError(f'{where}: truncated payload at byte {len(data)} (need {need})')
    dtype = '<f4' if scale < 0 else '>f4'
    grid = np.frombuffer(data, dtype=dtype, count=width * height, offset=offset).reshape(height, width)
    if not np.all(np.isfinite(grid)):
        raise FormatError(f'{where}: non-finite disparity values')
    return DenseMap(np.flipud(grid).astype(np.float32))


def encode_pfm(m: DenseMap) -> bytes:
    header = f'Pf\n{m.width} {m.height}\n-1.0\n'.encode('ascii')
    return header + np.flipud(np.asarray(m.values, dtype='<f4')).tobytes()


def load_disparity_map(path) -> DenseMap:
    with open(path, 'rb') as f:
        return decode_pfm(f.read(), str(path))


def save_disparity_map(path, m: DenseMap):
    write_bytes(path, encode_pfm(m))


def load_flow_sequence(flow_dir, sequence_id: str, frames: int) -> List[FlowField]:
    """Maps frame i → i+1 for i in [0, frames-1)."""
    base = Path(flow_dir) / sequence_id
    out = []
    for i in range(frames - 1):
        u, v = load_flow_field(base / FLOW_NAME.format(i))
        out.append(FlowField(u, v))
    return out


def load_depth_sequence(depth_dir, sequence_id: str, frames: int) -> List[DenseMap]:
    base = Path(depth_dir) / sequence_id
    return [load_disparity_map(base / DEPTH_NAME.format(i)) for i in range(frames)]


# ─── Aggregation & smoothing ─────────────────────────────────────────────────

def aggregate_in_box(m: DenseMap, b: BoundingBox, video_dims, shrink_fraction: float) -> float:
    """Mean of map cells whose centers fall inside the shrunken, rescaled box."""
    video_w, video_h = video_dims
    if not b.overlaps(video_w, video_h):
        raise InvalidArgument(f'box {b.to_list()} lies outside the {video_w}x{video_h} frame')
    inner = shrink_box(b.rescaled(m.width / video_w, m.height / video_h), shrink_fraction)
    # cell j is inside when its center j + 0.5 lies in [x0, x1)
    j_lo = max(0, math.ceil(inner.x - 0.5))
    j_hi = min(m.width - 1, math.ceil(inner.x + inner.w - 0.5) - 1)
    i_lo = max(0, math.ceil(inner.y - 0.5))
    i_hi = min(m.height - 1, math.ceil(inner.y + inner.h - 0.5) - 1)
    if j_hi < j_lo or i_hi < i_lo:
        cx, cy = inner.center
        return float(sample_bilinear(np.asarray(m.values, dtype=np.float64), [cx], [cy])[0])
    return float(np.asarray(m.values[i_lo:i_hi + 1, j_lo:j_hi + 1], dtype=np.float64).mean())


@dataclass(frozen=True)
class CueSeries:
    channel: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        series = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if series.size == 0 or not np.all(np.isfinite(series)):
            raise InvalidArgument(f'{self.channel} series must be non-empty and finite')
        object.__setattr__(self, 'values', series)

    def __len__(self):
        return self.values.size


def gaussian_kernel(taps: int, sigma: float) -> np.ndarray:
    if taps < 1 or taps % 2 != 1:
        raise InvalidArgument(f'gaussian taps must be odd, got {taps}')
    if sigma <= 0:
        raise InvalidArgument(f'gaussian sigma must be > 0, got {sigma}')
    k = np.arange(taps, dtype=np.float64) - (taps - 1) / 2
    kernel = np.exp(-k * k / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_smooth(s: CueSeries, taps: int, sigma: float) -> CueSeries:
    kernel = gaussian_kernel(taps, sigma)
    return CueSeries(s.channel, ndimage.convolve1d(s.values, kernel, mode='nearest'))


# ─── Feature vectors ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray = field(repr=False)
    layout_version: str
    vehicle_id: str = ''
    sequence_id: str = ''
    drive_id: str = ''
    last_frame_area: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, 'values', np.asarray(self.values, dtype=np.float64).reshape(-1))

    def __len__(self):
        return self.values.size

    def to_dict(self):
        return {
            'vehicle_id': self.vehicle_id,
            'layout_version': self.layout_version,
            'values': self.values.tolist(),
            'sequence_id': self.sequence_id,
            'drive_id': self.drive_id,
            'last_frame_area': self.last_frame_area,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(values=data['values'], layout_version=data['layout_version'],
                       vehicle_id=data.get('vehicle_id', ''), sequence_id=data.get('sequence_id', ''),
                       drive_id=data.get('drive_id', ''), last_frame_area=data.get('last_frame_area'))
        except KeyError as e:
            raise FormatError(f'feature record missing {e}') from e


def sampled_frames(frames: int, skip: int) -> List[int]:
    return list(range(frames - 1, -1, -skip))


def layout_version(frames: int, cfg: FeatureConfig) -> str:
    return f'{LAYOUT_PREFIX}/{"+".join(cfg.channels)}/skip{cfg.frame_skip}/n{frames}'


def feature_length(frames: int, cfg: FeatureConfig) -> int:
    per_frame = 4 * cfg.include_track + 2 * cfg.include_flow + cfg.include_depth
    return len(sampled_frames(frames, cfg.frame_skip)) * per_frame + int(cfg.include_track)


def _smooth(values, channel, cfg: FeatureConfig) -> np.ndarray:
    return gaussian_smooth(CueSeries(channel, values), cfg.gaussian_taps, cfg.gaussian_sigma).values


def assemble_features(track, flow: Optional[Sequence[FlowField]], depth: Optional[Sequence[DenseMap]],
                      cfg: FeatureConfig, vehicle_id: str = '') -> FeatureVector:
    boxes = track.boxes
    n = len(boxes)
    dims = (cfg.image_width, cfg.image_height)
    W, H = float(cfg.image_width), float(cfg.image_height)
    if cfg.include_flow:
        if flow is None or len(flow) != n - 1:
            raise InvalidArgument(f'{n}-frame track needs {n - 1} flow maps, got {0 if flow is None else len(flow)}')
        if n < 2:
            raise InvalidArgument('flow cues need at least two frames')
    if cfg.include_depth and (depth is None or len(depth) != n):
        raise InvalidArgument(f'{n}-frame track needs {n} depth maps, got {0 if depth is None else len(depth)}')

    columns = []
    if cfg.include_track:
        raw = np.array([[b.center[0] / W, b.center[1] / H, b.w / W, b.h / H] for b in boxes])
        if cfg.smooth_track:
            raw = np.column_stack([_smooth(raw[:, c], 'track', cfg) for c in range(4)])
        columns.append(raw)
    if cfg.include_flow:
        # the last frame has no outgoing map and reuses the previous one
        maps = [flow[min(t, n - 2)] for t in range(n)]
        u = [aggregate_in_box(f.u, b, dims, cfg.shrink_fraction) for f, b in zip(maps, boxes)]
        v = [aggregate_in_box(f.v, b, dims, cfg.shrink_fraction) for f, b in zip(maps, boxes)]
        columns.append(np.column_stack([_smooth(u, 'u', cfg), _smooth(v, 'v', cfg)]))
    if cfg.include_depth:
        d = [aggregate_in_box(m, b, dims, cfg.shrink_fraction) for m, b in zip(depth, boxes)]
        columns.append(_smooth(d, 'depth', cfg)[:, None])

    per_frame = np.hstack(columns)
    values = per_frame[sampled_frames(n, cfg.frame_skip)].ravel()
    last_area = boxes[-1].area
    if cfg.include_track:
        values = np.append(values, last_area / (W * H))
    return FeatureVector(values, layout_version(n, cfg), vehicle_id=vehicle_id,
                         sequence_id=getattr(track, 'sequence_id', ''), last_frame_area=last_area)


# ─── Features file ───────────────────────────────────────────────────────────

def save_features(path, vectors: Sequence[FeatureVector]):
    layouts = sorted({v.layout_version for v in vectors})
    if len(layouts) > 1:
        raise InvalidArgument(f'mixed feature layouts {layouts}')
    write_json(path, {'layout_version': layouts[0] if layouts else None,
                      'features': [v.to_dict() for v in vectors]})


def load_features(path) -> List[FeatureVector]:
    data = read_json(path)
    if not isinstance(data, dict) or 'features' not in data:
        raise FormatError(f'{path}: expected {{"layout_version", "features"}}')
    vectors = [FeatureVector.from_dict(d) for d in data['features']]
    layouts = {v.layout_version for v in vectors}
    if len(layouts) > 1:
        raise FormatError(f'{path}: mixed feature layouts {sorted(layouts)}')
    log.debug(f'{path}: {len(vectors)} feature vectors')
    return vectors
