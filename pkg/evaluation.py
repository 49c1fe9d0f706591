"""
Velocity error per true-distance range and the three-range average.

An empty range has no error: it is reported as None and the overall score is
then undefined (also None), never 0.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import get_logger
from dataset import read_json, write_json
from geometry import FormatError, InvalidArgument, RangeClass, VehicleAnnotation

log = get_logger('Eval')


def range_mse(predictions: Sequence, truths: Sequence) -> Optional[float]:
    """Mean squared norm of the 2-D velocity error; None for an empty range."""
    if len(predictions) != len(truths):
        raise InvalidArgument(f'{len(predictions)} predictions for {len(truths)} ground truths')
    if len(predictions) == 0:
        return None
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    true = np.asarray(truths, dtype=np.float64).reshape(-1, 2)
    diff = pred - true
    return float(np.mean(np.sum(diff * diff, axis=1)))


def challenge_score(e_near: Optional[float], e_medium: Optional[float], e_far: Optional[float]) -> Optional[float]:
    values = (e_near, e_medium, e_far)
    if any(v is None for v in values):
        return None
    for v in values:
        if not math.isfinite(v) or v < 0:
            raise InvalidArgument(f'range errors must be finite and >= 0, got {values}')
    return (e_near + e_medium + e_far) / 3.0


@dataclass(frozen=True)
class EvaluationReport:
    e_near: Optional[float]
    e_medium: Optional[float]
    e_far: Optional[float]
    e_v: Optional[float]
    counts: Dict[str, int] = field(default_factory=dict)
    rmse_overall: Optional[float] = None

    @property
    def undefined_ranges(self) -> List[str]:
        values = {'near': self.e_near, 'medium': self.e_medium, 'far': self.e_far}
        return [name for name, v in values.items() if v is None]

    def to_dict(self):
        return {
            'e_near': self.e_near,
            'e_medium': self.e_medium,
            'e_far': self.e_far,
            'e_v': self.e_v,
            'counts': dict(self.counts),
            'rmse_overall': self.rmse_overall,
            'undefined_ranges': self.undefined_ranges,
        }

    def summary(self) -> str:
        def fmt(v):
            return 'n/a' if v is None else f'{v:.4f}'
        return (f'E_V={fmt(self.e_v)} near={fmt(self.e_near)} medium={fmt(self.e_medium)} '
                f'far={fmt(self.e_far)} rmse={fmt(self.rmse_overall)}')


@dataclass(frozen=True)
class Prediction:
    vehicle_id: str
    velocity: Tuple[float, float]
    position: Tuple[float, float]

    def to_dict(self):
        return {'vehicle_id': self.vehicle_id, 'velocity': list(self.velocity), 'position': list(self.position)}

    @classmethod
    def from_dict(cls, data):
        try:
            vx, vy = data['velocity']
            px, py = data['position']
            return cls(str(data['vehicle_id']), (float(vx), float(vy)), (float(px), float(py)))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f'bad prediction record {data!r}: {e}') from e


def evaluate_dataset(predictions: Mapping[str, Prediction], annotations: Sequence[VehicleAnnotation]) -> EvaluationReport:
    """Bucket by true distance, score each bucket, then average the three."""
    missing_truth = [a.vehicle_id for a in annotations if not a.has_truth]
    missing_pred = [a.vehicle_id for a in annotations if a.vehicle_id not in predictions]
    if missing_truth or missing_pred:
        problems = []
        if missing_truth:
            problems.append(f'no ground truth for {missing_truth}')
        if missing_pred:
            problems.append(f'no prediction for {missing_pred}')
        raise InvalidArgument('; '.join(problems))

    buckets: Dict[RangeClass, Tuple[list, list]] = {rc: ([], []) for rc in RangeClass.ordered()}
    for a in annotations:
        pred, true = buckets[a.range_class]
        pred.append(predictions[a.vehicle_id].velocity)
        true.append(a.velocity)

    errors = {rc: range_mse(*buckets[rc]) for rc in RangeClass.ordered()}
    all_pred = [p for rc in RangeClass.ordered() for p in buckets[rc][0]]
    all_true = [t for rc in RangeClass.ordered() for t in buckets[rc][1]]
    overall = range_mse(all_pred, all_true)
    report = EvaluationReport(
        e_near=errors[RangeClass.NEAR],
        e_medium=errors[RangeClass.MEDIUM],
        e_far=errors[RangeClass.FAR],
        e_v=challenge_score(errors[RangeClass.NEAR], errors[RangeClass.MEDIUM], errors[RangeClass.FAR]),
        counts={rc.value: len(buckets[rc][0]) for rc in RangeClass.ordered()},
        rmse_overall=None if overall is None else math.sqrt(overall),
    )
    if report.undefined_ranges:
        log.warning(f'empty ranges {report.undefined_ranges}; E_V undefined')
    return report


def save_predictions(path, predictions: Sequence[Prediction]):
    write_json(path, {'predictions': [p.to_dict() for p in predictions]})


def load_predictions(path) -> Dict[str, Prediction]:
    data = read_json(path)
    records = data.get('predictions') if isinstance(data, dict) else data
    if not isinstance(records, list):
        raise FormatError(f'{path}: expected a list of predictions')
    return {p.vehicle_id: p for p in (Prediction.from_dict(r) for r in records)}
