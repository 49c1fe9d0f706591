"""Track overlays and the per-range error bar chart."""

import io
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
matplotlib.rcParams['svg.hashsalt'] = 'velocity'
import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle

from dataset import write_bytes
from evaluation import EvaluationReport
from geometry import ImageFrame
from tracker import Track, TrackSource

SOURCE_COLOURS = {TrackSource.MEDIAN_FLOW: '#2ca02c', TrackSource.FALLBACK: '#d62728'}


def _save(fig, path: Path, **kwargs):
    buf = io.BytesIO()
    try:
        fig.savefig(buf, **kwargs)
    finally:
        plt.close(fig)
    write_bytes(path, buf.getvalue())


def save_track_overlay(frame: ImageFrame, track: Track, index: int, path, truth=None):
    """One frame with its tracked box (green: Median Flow, red: NCC fallback)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(frame.width / 100.0, frame.height / 100.0), dpi=100)
    ax.imshow(frame.intensity, cmap='gray', vmin=0.0, vmax=1.0, interpolation='nearest',
              extent=(0, frame.width, frame.height, 0))
    b = track.boxes[index]
    ax.add_patch(Rectangle((b.x, b.y), b.w, b.h, fill=False, linewidth=1.5,
                           edgecolor=SOURCE_COLOURS[track.source[index]]))
    if truth is not None:
        t = truth[index]
        ax.add_patch(Rectangle((t.x, t.y), t.w, t.h, fill=False, linewidth=1.0,
                               linestyle='--', edgecolor='#1f77b4'))
    ax.set_axis_off()
    fig.subplots_adjust(0, 0, 1, 1)
    _save(fig, path, format=path.suffix.lstrip('.').lower() or 'png')


def save_range_bars(report: EvaluationReport, path):
    path = Path(path)
    names = ['near', 'medium', 'far']
    values = [report.e_near, report.e_medium, report.e_far]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    bars = ax.bar(names, [0.0 if v is None else v for v in values], color=['#4c72b0', '#55a868', '#c44e52'])
    for bar, v, n in zip(bars, values, names):
        label = 'n/a' if v is None else f'{v:.2f}'
        ax.annotate(f'{label}\n(n={report.counts.get(n, 0)})', (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha='center', va='bottom', fontsize=8)
    ax.set_ylabel('velocity MSE [m²/s²]')
    title = 'E_V n/a' if report.e_v is None else f'E_V = {report.e_v:.3f}'
    ax.set_title(title)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    _save(fig, path, format='svg', metadata={'Date': None})
