# dataset.py — Dash-cam velocity estimation
# encoding: utf-8
"""
Sequence manifests, frame files and atomic JSON output.

Manifest (one per sequence):
    {sequence_id, drive_id, fps, frame_files: [paths],
     annotations: [{last_frame_box: {x, y, w, h}, velocity: [vx, vy] | null,
                    position: [px, py] | null}]}
Frame paths are relative to the manifest's directory.
"""

import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
from PIL import Image

from config import get_logger
from geometry import (BoundingBox, FormatError, ImageFrame, InvalidArgument, UnsupportedFormat,
                      VehicleAnnotation, VideoSequence, rgb_to_luma, vehicle_id_for)

log = get_logger('Dataset')

MANIFEST_NAME = 'manifest.json'
INDEX_NAME = 'dataset.json'


# ─── Atomic output ───────────────────────────────────────────────────────────

def write_json(path, payload):
    """Write JSON via temp file + rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, indent=2, sort_keys=True) + '\n'
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + '.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + '.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f'{path}: not valid JSON ({e})') from e


# ─── Frames ──────────────────────────────────────────────────────────────────

def load_frame(path) -> ImageFrame:
    """8-bit PNG or PGM → grayscale ImageFrame in [0, 1]."""
    with Image.open(path) as img:
        if img.mode in ('L', 'P', 'I;16', 'I'):
            arr = np.asarray(img.convert('L'), dtype=np.float64) / 255.0
        else:
            arr = rgb_to_luma(np.asarray(img.convert('RGB')))
    return ImageFrame(arr)


def frame_to_uint8(frame: ImageFrame) -> np.ndarray:
    return np.clip(np.rint(frame.intensity * 255.0), 0, 255).astype(np.uint8)


def save_frame(frame: ImageFrame, path):
    """Encode by file suffix (.pgm, .png, ...) and write atomically."""
    path = Path(path)
    fmt = Image.registered_extensions().get(path.suffix.lower())
    if fmt is None:
        raise UnsupportedFormat(f'{path}: no image format for suffix "{path.suffix}"')
    buf = io.BytesIO()
    Image.fromarray(frame_to_uint8(frame)).save(buf, format=fmt)
    write_bytes(path, buf.getvalue())


# ─── Manifests ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SequenceRecord:
    """A parsed manifest; frames stay on disk until load_sequence()."""
    path: Path
    sequence_id: str
    drive_id: str
    fps: float
    frame_files: Tuple[Path, ...]
    annotations: Tuple[VehicleAnnotation, ...]

    def load_sequence(self) -> VideoSequence:
        frames = tuple(load_frame(p) for p in self.frame_files)
        return VideoSequence(frames, fps=self.fps, sequence_id=self.sequence_id, drive_id=self.drive_id)

    def __len__(self):
        return len(self.frame_files)


def _parse_pair(value, name, where):
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise FormatError(f'{where}: {name} must be [a, b] or null, got {value!r}')
    return float(value[0]), float(value[1])


def parse_manifest(data: dict, path) -> SequenceRecord:
    path = Path(path)
    where = str(path)
    required = ('sequence_id', 'drive_id', 'fps', 'frame_files', 'annotations')
    missing = [k for k in required if k not in data]
    if missing:
        raise FormatError(f'{where}: manifest missing keys {missing}')
    sequence_id = str(data['sequence_id'])
    base = path.parent
    frame_files = tuple(base / f for f in data['frame_files'])
    if not frame_files:
        raise FormatError(f'{where}: frame_files is empty')
    annotations = []
    for i, ann in enumerate(data['annotations']):
        try:
            box = BoundingBox.from_dict(ann['last_frame_box'])
        except (KeyError, InvalidArgument) as e:
            raise FormatError(f'{where}: annotation {i} has a bad last_frame_box ({e})') from e
        annotations.append(VehicleAnnotation(
            last_frame_box=box,
            velocity=_parse_pair(ann.get('velocity'), 'velocity', where),
            position=_parse_pair(ann.get('position'), 'position', where),
            vehicle_id=vehicle_id_for(sequence_id, i),
        ))
    try:
        fps = float(data['fps'])
    except (TypeError, ValueError) as e:
        raise FormatError(f'{where}: fps must be a number') from e
    if fps <= 0:
        raise FormatError(f'{where}: fps must be > 0, got {fps}')
    return SequenceRecord(path=path, sequence_id=sequence_id, drive_id=str(data['drive_id']),
                          fps=fps, frame_files=frame_files, annotations=tuple(annotations))


def load_manifest(path) -> SequenceRecord:
    return parse_manifest(read_json(path), path)


def manifest_payload(sequence_id, drive_id, fps, frame_files, annotations, axes=None):
    payload = {
        'sequence_id': sequence_id,
        'drive_id': drive_id,
        'fps': fps,
        'frame_files': [str(f) for f in frame_files],
        'annotations': [a.to_dict() for a in annotations],
    }
    if axes is not None:
        payload['axes'] = axes
    return payload


def load_dataset(path) -> List[SequenceRecord]:
    """A manifest file, a dataset.json index, or a directory tree of manifests."""
    path = Path(path)
    if path.is_dir():
        index = path / INDEX_NAME
        if index.exists():
            return load_dataset(index)
        manifests = sorted(path.rglob(MANIFEST_NAME))
        if not manifests:
            raise InvalidArgument(f'{path}: no {MANIFEST_NAME} found')
        return [load_manifest(p) for p in manifests]
    data = read_json(path)
    if isinstance(data, dict) and 'sequences' in data and 'frame_files' not in data:
        records = [load_manifest(path.parent / rel) for rel in data['sequences']]
        log.debug(f'{path}: {len(records)} sequences')
        return records
    return [parse_manifest(data, path)]


def annotations_by_vehicle(records) -> dict:
    """vehicle_id → (record, annotation)."""
    out = {}
    for rec in records:
        for ann in rec.annotations:
            out[ann.vehicle_id] = (rec, ann)
    return out


def frame_size(record: SequenceRecord) -> Tuple[int, int]:
    """(width, height) of a sequence without decoding every frame."""
    with Image.open(record.frame_files[0]) as img:
        return img.size
