# tracker.py — Dash-cam velocity estimation
# encoding: utf-8
"""
Backward-in-time vehicle tracking from a last-frame box.

Median Flow: a grid of points is tracked with pyramidal Lucas-Kanade from
frame t to t-1 and back again; points with low forward-backward error and
high patch NCC vote on the box translation (median displacement) and scale
(median ratio of pairwise point distances). A vote whose kept points no
longer look like the template, or whose scale jumps implausibly, counts as a
failure. Before giving up, the box is tried at a few zoom factors, and the
best-matching one seeds a second vote on a pre-zoomed frame. When that fails
too the frame is filled by an NCC template search that only translates the box.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from config import TrackerConfig, get_logger
from dataset import read_json, write_json
from geometry import (BoundingBox, FormatError, ImageFrame, InvalidArgument, VideoSequence,
                      iou, sample_bilinear)

log = get_logger('Track')

MIN_POINTS = 4
MIN_EIGENVALUE = 1e-4     # per window pixel
STALL_STEP = 0.1          # px; a level-0 step this large after the last iteration is a walk, not a wobble
ZOOM_CANDIDATES = (0.5, 1.0 / 1.5, 1.0, 1.5, 2.0)
ZOOM_GRID = 24
_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


# ─── Pyramids ────────────────────────────────────────────────────────────────

class _WindowSampler:
    """
    Square windows read from one image with bilinear interpolation.

    The image is edge-padded once; a read is then four integer gathers
    weighted by the fractional part of each window centre. Values match
    sample_bilinear, including the clamp at the borders.
    """

    def __init__(self, image: np.ndarray, half: int):
        pad = half + 3
        padded = np.pad(np.asarray(image, dtype=np.float64), pad, mode='edge')
        stride = padded.shape[1]
        oy, ox = np.mgrid[-half:half + 1, -half:half + 1]
        flat = padded.ravel()
        self._corners = (flat, flat[1:], flat[stride:], flat[stride + 1:])
        self._window = (oy * stride + ox).ravel()
        self._pad = pad
        self._stride = stride
        self._height, self._width = image.shape

    def __call__(self, pos: np.ndarray) -> np.ndarray:
        x = np.clip(pos[:, 0] - 0.5, -1.0, float(self._width))
        y = np.clip(pos[:, 1] - 0.5, -1.0, float(self._height))
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        base = (y0.astype(np.intp) + self._pad) * self._stride + x0.astype(np.intp) + self._pad
        index = base[:, None] + self._window
        c00, c01, c10, c11 = (c[index] for c in self._corners)
        return (c00 * ((1.0 - fx) * (1.0 - fy)) + c01 * (fx * (1.0 - fy))
                + c10 * ((1.0 - fx) * fy) + c11 * (fx * fy))


@dataclass(frozen=True)
class ImagePyramid:
    levels: Tuple[np.ndarray, ...]
    grad_x: Tuple[np.ndarray, ...] = field(repr=False)
    grad_y: Tuple[np.ndarray, ...] = field(repr=False)
    _samplers: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.levels)

    @property
    def shapes(self):
        return [(lv.shape[1], lv.shape[0]) for lv in self.levels]

    def sampler(self, level: int, half: int, kind: str = 'intensity') -> _WindowSampler:
        key = (kind, level, half)
        if key not in self._samplers:
            source = {'intensity': self.levels, 'gx': self.grad_x, 'gy': self.grad_y}[kind]
            self._samplers[key] = _WindowSampler(source[level], half)
        return self._samplers[key]


def _gradient(level: np.ndarray, axis: int) -> np.ndarray:
    if level.shape[axis] < 2:
        return np.zeros_like(level)
    return np.gradient(level, axis=axis)


def _pyramid(arr: np.ndarray, levels: int) -> ImagePyramid:
    out = [np.asarray(arr, dtype=np.float64)]
    for _ in range(1, levels):
        smooth = ndimage.correlate1d(out[-1], _BINOMIAL, axis=0, mode='nearest')
        smooth = ndimage.correlate1d(smooth, _BINOMIAL, axis=1, mode='nearest')
        out.append(smooth[::2, ::2])
    return ImagePyramid(levels=tuple(out),
                        grad_x=tuple(_gradient(lv, 1) for lv in out),
                        grad_y=tuple(_gradient(lv, 0) for lv in out))


def build_pyramid(frame: ImageFrame, levels: int) -> ImagePyramid:
    """Level k is level k-1 smoothed with a 5-tap binomial and halved (ceil)."""
    if levels < 1:
        raise InvalidArgument(f'pyramid needs at least one level, got {levels}')
    need = 2 ** (levels - 1)
    if frame.width < need or frame.height < need:
        raise InvalidArgument(f'{frame.width}x{frame.height} frame is too small for {levels} levels '
                              f'(needs {need} px per side)')
    return _pyramid(frame.intensity, levels)


def _level_coords(points: np.ndarray, level: int) -> np.ndarray:
    # decimation keeps even samples, so level-0 pixel 2^L*j and level-L pixel j share a center
    scale = 2.0 ** level
    return (points - 0.5) / scale + 0.5


# ─── Lucas-Kanade ────────────────────────────────────────────────────────────

def _inside(pos: np.ndarray, width: int, height: int) -> np.ndarray:
    return (pos[:, 0] >= 0) & (pos[:, 0] < width) & (pos[:, 1] >= 0) & (pos[:, 1] < height)


def _lk_flow(prev: ImagePyramid, nxt: ImagePyramid, points: np.ndarray, cfg: TrackerConfig):
    """Coarse-to-fine LK for many points at once → (positions, converged mask)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    half = cfg.lk_window // 2
    n_win = cfg.lk_window * cfg.lk_window
    ok = _inside(points, prev.levels[0].shape[1], prev.levels[0].shape[0])
    guess = np.zeros((n, 2))

    for level in range(len(prev) - 1, -1, -1):
        height, width = prev.levels[level].shape
        base = _level_coords(points, level)
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            break

        at = base[idx]
        tmpl = prev.sampler(level, half)(at)
        ix = prev.sampler(level, half, 'gx')(at)
        iy = prev.sampler(level, half, 'gy')(at)
        sxx = np.einsum('ij,ij->i', ix, ix)
        sxy = np.einsum('ij,ij->i', ix, iy)
        syy = np.einsum('ij,ij->i', iy, iy)
        trace = sxx + syy
        det = sxx * syy - sxy * sxy
        min_eig = 0.5 * (trace - np.sqrt(np.maximum(trace * trace - 4.0 * det, 0.0)))
        textured = min_eig / n_win >= MIN_EIGENVALUE
        ok[idx[~textured]] = False
        keep = np.flatnonzero(textured)
        idx = idx[keep]
        if idx.size == 0:
            break
        tmpl, ix, iy = tmpl[keep], ix[keep], iy[keep]
        sxx, sxy, syy, det = sxx[keep], sxy[keep], syy[keep], det[keep]

        dst = nxt.sampler(level, half)
        start = base[idx] + guess[idx]
        step_total = np.zeros((idx.size, 2))
        last_step = np.zeros(idx.size)
        active = np.ones(idx.size, dtype=bool)
        for _ in range(cfg.lk_max_iterations):
            a = np.flatnonzero(active)
            if a.size == 0:
                break
            pos = start[a] + step_total[a]
            inside = _inside(pos, width, height)
            if not inside.all():
                ok[idx[a[~inside]]] = False
                active[a[~inside]] = False
                a, pos = a[inside], pos[inside]
                if a.size == 0:
                    break
            err = tmpl[a] - dst(pos)
            bx = np.einsum('ij,ij->i', err, ix[a])
            by = np.einsum('ij,ij->i', err, iy[a])
            dx = (syy[a] * bx - sxy[a] * by) / det[a]
            dy = (sxx[a] * by - sxy[a] * bx) / det[a]
            step_total[a, 0] += dx
            step_total[a, 1] += dy
            last_step[a] = np.hypot(dx, dy)
            active[a[last_step[a] < cfg.lk_epsilon]] = False

        if level == 0:
            # iterations ran out while still moving
            ok[idx[active & (last_step >= STALL_STEP)]] = False
        final = start + step_total
        outside = ~_inside(final, width, height)
        ok[idx[outside]] = False
        total = guess[idx] + step_total
        guess[idx] = total * 2.0 if level > 0 else total

    return points + guess, ok


def lk_track_point(prev: ImagePyramid, nxt: ImagePyramid, p, cfg: TrackerConfig):
    """Track one point from prev to next → ((x, y), converged)."""
    height, width = prev.levels[0].shape
    x, y = float(p[0]), float(p[1])
    if not (0 <= x < width and 0 <= y < height):
        raise InvalidArgument(f'point ({x}, {y}) lies outside the {width}x{height} image')
    q, ok = _lk_flow(prev, nxt, np.array([[x, y]]), cfg)
    return (float(q[0, 0]), float(q[0, 1])), bool(ok[0])


# ─── Median Flow ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class PointTrack:
    start: Tuple[float, float]
    forward: Tuple[float, float]
    backward: Tuple[float, float]
    fb_error: float
    ncc: float
    converged: bool


@dataclass(frozen=True)
class Failure:
    reason: str
    kept_points: int = 0
    median_fb: float = math.inf


def grid_points(b: BoundingBox, grid: int) -> np.ndarray:
    """grid x grid points inside b, half a cell in from every edge."""
    steps = (np.arange(grid, dtype=np.float64) + 0.5) / grid
    xs = b.x + steps * b.w
    ys = b.y + steps * b.h
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def _roi(b: BoundingBox, width: int, height: int, cfg: TrackerConfig):
    """Integer crop around b, origin aligned to the coarsest pyramid cell."""
    align = 2 ** (cfg.pyramid_levels - 1)
    margin = (cfg.lk_window // 2 + 4) * 2 ** cfg.pyramid_levels
    x0 = max(0, int(math.floor((b.x - margin) / align)) * align)
    y0 = max(0, int(math.floor((b.y - margin) / align)) * align)
    x1 = min(width, int(math.ceil(b.x + b.w + margin)))
    y1 = min(height, int(math.ceil(b.y + b.h + margin)))
    return x0, y0, x1, y1


def _levels_for(shape, wanted: int) -> int:
    side = min(shape)
    return max(1, min(wanted, int(math.floor(math.log2(side))) + 1))


def _ncc_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    denom = np.sqrt((a * a).sum(axis=-1) * (b * b).sum(axis=-1))
    num = (a * b).sum(axis=-1)
    return np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)


def _track_grid(prev: ImageFrame, nxt: ImageFrame, b: BoundingBox, cfg: TrackerConfig, zoom: float = 1.0):
    """Forward/backward LK over the box grid inside a cropped region.

    With zoom != 1 the prev crop is resampled magnified by zoom about b's
    centre, so b is then the expected box in both frames."""
    x0, y0, x1, y1 = _roi(b, prev.width, prev.height, cfg)
    if zoom == 1.0:
        src = prev.intensity[y0:y1, x0:x1]
    else:
        cx, cy = b.center
        gx, gy = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
        src = sample_bilinear(prev.intensity, cx + (gx - cx) / zoom, cy + (gy - cy) / zoom)
    dst = nxt.intensity[y0:y1, x0:x1]
    levels = _levels_for(src.shape, cfg.pyramid_levels)
    prev_pyr = _pyramid(src, levels)
    next_pyr = _pyramid(dst, levels)

    origin = np.array([x0, y0], dtype=np.float64)
    start = grid_points(b, cfg.grid) - origin
    fwd, ok_f = _lk_flow(prev_pyr, next_pyr, start, cfg)
    bwd = np.full_like(start, np.nan)
    ok_b = np.zeros(len(start), dtype=bool)
    sel = np.flatnonzero(ok_f)
    if sel.size:
        bwd[sel], ok_b[sel] = _lk_flow(next_pyr, prev_pyr, fwd[sel], cfg)
    converged = ok_f & ok_b
    fb = np.full(len(start), math.inf)
    fb[converged] = np.hypot(*(start[converged] - bwd[converged]).T)
    ncc = np.zeros(len(start))
    if converged.any():
        half = cfg.lk_window // 2
        ncc[converged] = _ncc_rows(prev_pyr.sampler(0, half)(start[converged]),
                                   next_pyr.sampler(0, half)(fwd[converged]))
    return start + origin, fwd + origin, bwd + origin, fb, ncc, converged


def point_tracks(prev: ImageFrame, nxt: ImageFrame, b: BoundingBox, cfg: TrackerConfig) -> List[PointTrack]:
    start, fwd, bwd, fb, ncc, converged = _track_grid(prev, nxt, b, cfg)
    return [PointTrack(tuple(start[i]), tuple(fwd[i]), tuple(bwd[i]), float(fb[i]),
                       float(ncc[i]), bool(converged[i]))
            for i in range(len(start))]


def _best_fraction(values: np.ndarray, fraction: float, largest: bool) -> np.ndarray:
    """Mask of values at least as good as the k-th best (ties kept)."""
    k = max(1, int(math.ceil(fraction * values.size)))
    ordered = np.sort(values)
    if largest:
        return values >= ordered[::-1][k - 1]
    return values <= ordered[k - 1]


def _median_scale(p: np.ndarray, q: np.ndarray) -> float:
    i, j = np.triu_indices(len(p), k=1)
    d_prev = np.hypot(*(p[i] - p[j]).T)
    d_next = np.hypot(*(q[i] - q[j]).T)
    valid = d_prev > 0
    if not valid.any():
        return 1.0
    return float(np.median(d_next[valid] / d_prev[valid]))


def _vote(prev: ImageFrame, nxt: ImageFrame, b: BoundingBox, cfg: TrackerConfig,
          zoom: float = 1.0) -> Union[BoundingBox, Failure]:
    start, fwd, _, fb, ncc, converged = _track_grid(prev, nxt, b, cfg, zoom)
    valid = np.flatnonzero(converged)
    if valid.size < MIN_POINTS:
        return Failure('too few converged points', kept_points=int(valid.size))

    good_fb = _best_fraction(fb[valid], cfg.keep_fraction, largest=False)
    good_ncc = _best_fraction(ncc[valid], cfg.keep_fraction, largest=True)
    kept = valid[good_fb & good_ncc]
    if kept.size < MIN_POINTS:
        return Failure('too few reliable points', kept_points=int(kept.size))
    median_fb = float(np.median(fb[kept]))
    if median_fb > cfg.failure_fb_threshold:
        return Failure('forward-backward error too large', kept_points=int(kept.size), median_fb=median_fb)
    if float(np.median(ncc[kept])) < cfg.min_patch_ncc:
        return Failure('kept points no longer match', kept_points=int(kept.size), median_fb=median_fb)

    shift = fwd[kept] - start[kept]
    dx = float(np.median(shift[:, 0]))
    dy = float(np.median(shift[:, 1]))
    scale = _median_scale(start[kept], fwd[kept])
    if not (math.isfinite(scale) and scale > 0):
        return Failure('degenerate scale estimate', kept_points=int(kept.size), median_fb=median_fb)
    total = scale * zoom
    if not 1.0 / cfg.max_scale_change <= total <= cfg.max_scale_change:
        return Failure(f'scale change {total:.2f} out of range', kept_points=int(kept.size),
                       median_fb=median_fb)
    return b.scaled(scale, dx, dy)


def _zoom_candidate(prev: ImageFrame, nxt: ImageFrame, b: BoundingBox, cfg: TrackerConfig) -> Optional[float]:
    """Zoom about b's centre under which next best matches prev's box content."""
    steps = (np.arange(ZOOM_GRID, dtype=np.float64) + 0.5) / ZOOM_GRID

    def grid(box):
        return np.meshgrid(box.x + steps * box.w, box.y + steps * box.h)

    template = sample_bilinear(prev.intensity, *grid(b)).ravel()
    scored = []
    for zoom in ZOOM_CANDIDATES:
        seen = sample_bilinear(nxt.intensity, *grid(b.scaled(zoom))).ravel()
        scored.append((float(_ncc_rows(template, seen)), zoom))
    score, zoom = max(scored)
    if zoom == 1.0 or score < cfg.min_patch_ncc:
        return None
    return zoom


def median_flow_step(prev: ImageFrame, nxt: ImageFrame, b: BoundingBox,
                     cfg: TrackerConfig) -> Union[BoundingBox, Failure]:
    if not b.overlaps(prev.width, prev.height):
        raise InvalidArgument(f'box {b.to_list()} lies outside the {prev.width}x{prev.height} frame')
    direct = _vote(prev, nxt, b, cfg)
    if not isinstance(direct, Failure):
        return direct
    zoom = _zoom_candidate(prev, nxt, b, cfg)
    if zoom is None:
        return direct
    rescued = _vote(prev, nxt, b.scaled(zoom), cfg, zoom)
    if isinstance(rescued, Failure):
        return direct
    log.debug(f'{direct.reason}; recovered with zoom {zoom:.2f}')
    return rescued


# ─── NCC fallback ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FallbackResult:
    box: BoundingBox
    flagged: bool
    score: float
    offset: Tuple[int, int] = (0, 0)


def _normxcorr_valid(template: np.ndarray, region: np.ndarray) -> np.ndarray:
    """NCC of template against every same-size window of region ('valid' placement)."""
    t = template - template.mean()
    t_energy = float((t * t).sum())
    ones = np.ones(template.shape)
    num = fftconvolve(region, t[::-1, ::-1], mode='valid')
    local_sum = fftconvolve(region, ones, mode='valid')
    local_sq = fftconvolve(region * region, ones, mode='valid')
    local_var = np.maximum(local_sq - local_sum * local_sum / template.size, 0.0)
    with np.errstate(divide='ignore', invalid='ignore'):
        out = num / np.sqrt(local_var * t_energy)
    out[~np.isfinite(out)] = 0.0
    return out


def ncc_fallback_step(prev: ImageFrame, nxt: ImageFrame, b: BoundingBox,
                      cfg: TrackerConfig) -> FallbackResult:
    """Exhaustive integer NCC search within ±radius; never rescales the box.

    Flags the frame when the peak sits on the search border or scores below
    cfg.fallback_min_ncc."""
    if not b.overlaps(prev.width, prev.height):
        return FallbackResult(b, flagged=True, score=0.0)
    radius = cfg.ncc_search_radius
    tw = max(1, int(round(b.w)))
    th = max(1, int(round(b.h)))
    cols = np.arange(tw, dtype=np.float64) + 0.5
    rows = np.arange(th, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(b.x + cols, b.y + rows)
    template = sample_bilinear(prev.intensity, gx, gy)
    if np.ptp(template) <= 1e-12:
        return FallbackResult(b, flagged=True, score=0.0)

    rcols = np.arange(tw + 2 * radius, dtype=np.float64) + 0.5 - radius
    rrows = np.arange(th + 2 * radius, dtype=np.float64) + 0.5 - radius
    rx, ry = np.meshgrid(b.x + rcols, b.y + rrows)
    region = sample_bilinear(nxt.intensity, rx, ry)
    scores = _normxcorr_valid(template, region)

    best = scores.max()
    iy, ix = np.nonzero(scores >= best - 1e-12)
    oy, ox = iy - radius, ix - radius
    pick = int(np.lexsort((ox, oy, ox * ox + oy * oy))[0])
    dx, dy = int(ox[pick]), int(oy[pick])
    flagged = abs(dx) == radius or abs(dy) == radius or best < cfg.fallback_min_ncc
    return FallbackResult(b.translated(dx, dy), flagged=bool(flagged), score=float(best), offset=(dx, dy))


# ─── Whole tracks ────────────────────────────────────────────────────────────

class TrackSource(Enum):
    MEDIAN_FLOW = 'mf'
    FALLBACK = 'fb'


@dataclass(frozen=True)
class Track:
    boxes: Tuple[BoundingBox, ...]
    source: Tuple[TrackSource, ...]
    flagged: Tuple[bool, ...] = ()
    sequence_id: str = ''
    vehicle_id: str = ''

    def __post_init__(self):
        if len(self.boxes) != len(self.source):
            raise InvalidArgument('track needs one source flag per box')
        if not self.flagged:
            object.__setattr__(self, 'flagged', (False,) * len(self.boxes))

    def __len__(self):
        return len(self.boxes)

    @property
    def fallback_frames(self) -> List[int]:
        return [i for i, s in enumerate(self.source) if s is TrackSource.FALLBACK]

    def to_dict(self):
        return {
            'sequence_id': self.sequence_id,
            'vehicle_id': self.vehicle_id,
            'boxes': [b.to_list() for b in self.boxes],
            'source': [s.value for s in self.source],
            'flagged': [i for i, f in enumerate(self.flagged) if f],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            boxes = tuple(BoundingBox.from_list(b) for b in data['boxes'])
            source = tuple(TrackSource(s) for s in data['source'])
        except (KeyError, ValueError) as e:
            raise InvalidArgument(f'bad track document: {e}') from e
        flagged = set(data.get('flagged', []))
        return cls(boxes, source, tuple(i in flagged for i in range(len(boxes))),
                   sequence_id=data.get('sequence_id', ''), vehicle_id=data.get('vehicle_id', ''))


def track_vehicle(seq: VideoSequence, last_box: BoundingBox, cfg: TrackerConfig,
                  vehicle_id: str = '') -> Track:
    """Median Flow from the last frame back to the first, NCC where it fails."""
    frames = seq.frames
    last = frames[-1]
    if not last_box.overlaps(last.width, last.height):
        raise InvalidArgument(f'last box {last_box.to_list()} does not overlap the last frame')

    n = len(frames)
    boxes: List[Optional[BoundingBox]] = [None] * n
    source = [TrackSource.MEDIAN_FLOW] * n
    flagged = [False] * n
    boxes[-1] = last_box

    for t in range(n - 1, 0, -1):
        prev, nxt, box = frames[t], frames[t - 1], boxes[t]
        step = median_flow_step(prev, nxt, box, cfg) if box.overlaps(prev.width, prev.height) \
            else Failure('box left the frame')
        if isinstance(step, Failure):
            fb = ncc_fallback_step(prev, nxt, box, cfg)
            # weak match: keep the previous box
            boxes[t - 1] = fb.box if fb.score >= cfg.fallback_min_ncc else box
            source[t - 1] = TrackSource.FALLBACK
            flagged[t - 1] = fb.flagged
            log.debug(f'{seq.sequence_id} frame {t - 1}: {step.reason}, ncc offset {fb.offset}')
        else:
            boxes[t - 1] = step

    track = Track(tuple(boxes), tuple(source), tuple(flagged),
                  sequence_id=seq.sequence_id, vehicle_id=vehicle_id)
    if track.fallback_frames:
        log.info(f'{vehicle_id or seq.sequence_id} fallback frames={track.fallback_frames}')
    return track


def track_iou(track: Track, truth: Sequence[BoundingBox]) -> List[float]:
    if len(truth) != len(track):
        raise InvalidArgument(f'{len(truth)} truth boxes for a {len(track)}-frame track')
    return [iou(a, b) for a, b in zip(track.boxes, truth)]


def save_tracks(path, tracks: Sequence[Track]):
    write_json(path, {'tracks': [t.to_dict() for t in tracks]})


def load_tracks(path) -> dict:
    """vehicle_id → Track."""
    data = read_json(path)
    if not isinstance(data, dict) or not isinstance(data.get('tracks'), list):
        raise FormatError(f'{path}: expected {{"tracks": [...]}}')
    tracks = [Track.from_dict(t) for t in data['tracks']]
    return {t.vehicle_id: t for t in tracks}
