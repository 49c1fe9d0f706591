# geometry.py — Dash-cam velocity estimation
# encoding: utf-8
"""
Shared value types: boxes, frames, sequences, annotations and range labels,
plus the error hierarchy every other module raises.

Coordinates are continuous pixels: pixel (row i, col j) covers
[j, j+1) x [i, i+1), so its center sits at (j + 0.5, i + 0.5).
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage


# ─── Errors ──────────────────────────────────────────────────────────────────

class VelocityError(Exception):
    """Base for every error the pipeline raises on purpose."""


class InvalidArgument(VelocityError, ValueError):
    pass


class ConfigError(InvalidArgument):
    pass


class FormatError(VelocityError, ValueError):
    pass


class UnsupportedFormat(FormatError):
    pass


class MissingModel(VelocityError, LookupError):
    def __init__(self, range_class):
        self.range_class = range_class
        super().__init__(f'no models trained for range {range_class.value!r}')


# ─── Boxes ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ('x', 'y', 'w', 'h'):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise InvalidArgument(f'box {name} must be finite, got {value}')
            object.__setattr__(self, name, value)
        if self.w <= 0 or self.h <= 0:
            raise InvalidArgument(f'box needs w > 0 and h > 0, got w={self.w} h={self.h}')

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + 0.5 * self.w, self.y + 0.5 * self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - 0.5 * w, cy - 0.5 * h, w, h)

    @classmethod
    def from_list(cls, values):
        if values is None or len(values) != 4:
            raise InvalidArgument(f'box needs 4 values [x, y, w, h], got {values!r}')
        return cls(*values)

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data['x'], data['y'], data['w'], data['h'])
        except (KeyError, TypeError) as e:
            raise InvalidArgument(f'box needs keys x, y, w, h: {e}') from e

    def translated(self, dx, dy):
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)

    def scaled(self, ratio, dx=0.0, dy=0.0):
        """Rescale about the (translated) center."""
        if ratio == 1.0:
            return self.translated(dx, dy) if (dx or dy) else self
        cx, cy = self.center
        return BoundingBox.from_center(cx + dx, cy + dy, self.w * ratio, self.h * ratio)

    def rescaled(self, sx, sy):
        """Map into another resolution (e.g. video pixels → 512x256 map cells)."""
        return BoundingBox(self.x * sx, self.y * sy, self.w * sx, self.h * sy)

    def overlaps(self, width, height):
        return self.x < width and self.x + self.w > 0 and self.y < height and self.y + self.h > 0

    def to_list(self):
        return [self.x, self.y, self.w, self.h]

    def to_dict(self):
        return {'x': self.x, 'y': self.y, 'w': self.w, 'h': self.h}


def shrink_box(b: BoundingBox, fraction: float) -> BoundingBox:
    """Same center, width and height scaled by (1 - fraction)."""
    if not 0.0 <= fraction < 1.0:
        raise InvalidArgument(f'shrink fraction must be in [0, 1), got {fraction}')
    if fraction == 0.0:
        return b
    keep = 1.0 - fraction
    w = b.w * keep
    h = b.h * keep
    return BoundingBox(b.x + 0.5 * (b.w - w), b.y + 0.5 * (b.h - h), w, h)


def box_area(b: BoundingBox) -> float:
    return b.w * b.h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


# ─── Range labels ────────────────────────────────────────────────────────────

class RangeClass(Enum):
    NEAR = 'near'
    MEDIUM = 'medium'
    FAR = 'far'

    @classmethod
    def ordered(cls):
        return (cls.NEAR, cls.MEDIUM, cls.FAR)


NEAR_LIMIT_M = 20.0
FAR_LIMIT_M = 45.0


def classify_range_by_distance(d: float) -> RangeClass:
    """[0, 20) near, [20, 45) medium, [45, inf) far."""
    if not math.isfinite(d) or d < 0:
        raise InvalidArgument(f'distance must be finite and >= 0, got {d}')
    if d < NEAR_LIMIT_M:
        return RangeClass.NEAR
    if d < FAR_LIMIT_M:
        return RangeClass.MEDIUM
    return RangeClass.FAR


# ─── Frames & sequences ──────────────────────────────────────────────────────

def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """8-bit RGB (H, W, 3) → intensity in [0, 1] with 0.299/0.587/0.114 weights."""
    rgb = np.asarray(rgb, dtype=np.float64)
    luma = rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114
    return np.clip(luma / 255.0, 0.0, 1.0)


def sample_bilinear(values: np.ndarray, xs, ys) -> np.ndarray:
    """Bilinear lookup at continuous pixel coordinates, clamped at the borders."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    coords = np.stack([ys.ravel() - 0.5, xs.ravel() - 0.5])
    out = ndimage.map_coordinates(values, coords, order=1, mode='nearest', prefilter=False)
    return out.reshape(xs.shape)


@dataclass(frozen=True)
class ImageFrame:
    intensity: np.ndarray = field(repr=False)

    def __post_init__(self):
        pixels = np.asarray(self.intensity, dtype=np.float64)
        if pixels.ndim != 2 or pixels.size == 0:
            raise InvalidArgument(f'frame needs a non-empty 2-D intensity grid, got shape {pixels.shape}')
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidArgument('frame intensities must lie in [0, 1]')
        if pixels is self.intensity:
            pixels = pixels.copy()
        pixels.setflags(write=False)
        object.__setattr__(self, 'intensity', pixels)

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    def __repr__(self):
        return f'<ImageFrame {self.width}x{self.height}>'


@dataclass(frozen=True)
class VideoSequence:
    frames: Tuple[ImageFrame, ...]
    fps: float = 20.0
    sequence_id: str = ''
    drive_id: str = ''

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InvalidArgument('sequence needs at least one frame')
        if self.fps <= 0:
            raise InvalidArgument(f'fps must be > 0, got {self.fps}')
        w, h = frames[0].width, frames[0].height
        for i, fr in enumerate(frames):
            if fr.width != w or fr.height != h:
                raise InvalidArgument(f'frame {i} is {fr.width}x{fr.height}, expected {w}x{h}')
        object.__setattr__(self, 'frames', frames)

    def __len__(self):
        return len(self.frames)

    @property
    def size(self) -> Tuple[int, int]:
        return self.frames[0].width, self.frames[0].height

    def __repr__(self):
        w, h = self.size
        return f'<VideoSequence {self.sequence_id} [{len(self)} x {w}x{h} @ {self.fps}fps]>'


# ─── Annotations ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class VehicleAnnotation:
    last_frame_box: BoundingBox
    velocity: Optional[Tuple[float, float]] = None
    position: Optional[Tuple[float, float]] = None
    vehicle_id: str = ''

    def __post_init__(self):
        for name in ('velocity', 'position'):
            value = getattr(self, name)
            if value is not None:
                if len(value) != 2 or not all(math.isfinite(float(v)) for v in value):
                    raise InvalidArgument(f'{name} must be two finite numbers, got {value!r}')
                object.__setattr__(self, name, (float(value[0]), float(value[1])))

    @property
    def distance(self) -> Optional[float]:
        if self.position is None:
            return None
        return math.hypot(*self.position)

    @property
    def has_truth(self) -> bool:
        return self.velocity is not None and self.position is not None

    @property
    def range_class(self) -> Optional[RangeClass]:
        d = self.distance
        return None if d is None else classify_range_by_distance(d)

    def to_dict(self):
        return {
            'last_frame_box': self.last_frame_box.to_dict(),
            'velocity': list(self.velocity) if self.velocity is not None else None,
            'position': list(self.position) if self.position is not None else None,
        }


def vehicle_id_for(sequence_id: str, index: int) -> str:
    return f'{sequence_id}:{index}'


def range_proportions(distances: Sequence[float]):
    """Fraction of near/medium/far among true distances."""
    counts = {rc: 0 for rc in RangeClass.ordered()}
    for d in distances:
        counts[classify_range_by_distance(d)] += 1
    total = max(1, len(distances))
    return {rc.value: counts[rc] / total for rc in RangeClass.ordered()}
