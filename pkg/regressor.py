# regressor.py — Dash-cam velocity estimation
# encoding: utf-8
"""
Fully connected regressor written directly against numpy.

Hidden layers are affine → (dropout) → CReLU, the output layer is affine and
linear, targets are (vx, vy, px, py). Training uses Adam with L2 decay on
weights, minibatches shuffled per epoch and early stopping on the validation
velocity error alone.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import TrainConfig, get_logger
from dataset import read_json, write_json
from geometry import FormatError, InvalidArgument

log = get_logger('MLP')

OUTPUT_DIM = 4
ACTIVATIONS = ('crelu', 'relu')


# ─── Topology & parameters ───────────────────────────────────────────────────

@dataclass(frozen=True)
class MlpTopology:
    input_dim: int
    hidden_layers: int
    hidden_units: int
    output_dim: int = OUTPUT_DIM
    activation: str = 'crelu'

    def __post_init__(self):
        for name in ('input_dim', 'hidden_layers', 'hidden_units', 'output_dim'):
            if int(getattr(self, name)) < 1:
                raise InvalidArgument(f'topology {name} must be >= 1, got {getattr(self, name)}')
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f'activation must be one of {ACTIVATIONS}, got {self.activation!r}')

    @property
    def hidden_width(self) -> int:
        """Width a hidden layer hands to the next one (CReLU doubles it)."""
        return self.hidden_units * (2 if self.activation == 'crelu' else 1)

    def layer_shapes(self) -> List[Tuple[int, int]]:
        shapes = [(self.input_dim, self.hidden_units)]
        shapes += [(self.hidden_width, self.hidden_units)] * (self.hidden_layers - 1)
        shapes.append((self.hidden_width, self.output_dim))
        return shapes

    @property
    def parameter_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def to_dict(self):
        return {'input_dim': self.input_dim, 'hidden_layers': self.hidden_layers,
                'hidden_units': self.hidden_units, 'output_dim': self.output_dim,
                'activation': self.activation}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(int(data['input_dim']), int(data['hidden_layers']), int(data['hidden_units']),
                       int(data.get('output_dim', OUTPUT_DIM)), data.get('activation', 'crelu'))
        except (KeyError, TypeError) as e:
            raise FormatError(f'bad topology block: {e}') from e


@dataclass(frozen=True)
class MlpParameters:
    weights: Tuple[np.ndarray, ...] = field(repr=False)
    biases: Tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise InvalidArgument('one bias vector per weight matrix')
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise InvalidArgument(f'layer shapes disagree: W{W.shape} b{b.shape}')
        object.__setattr__(self, 'weights', tuple(self.weights))
        object.__setattr__(self, 'biases', tuple(self.biases))

    def arrays(self) -> List[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def astype(self, dtype) -> 'MlpParameters':
        return MlpParameters(tuple(W.astype(dtype) for W in self.weights),
                             tuple(b.astype(dtype) for b in self.biases))

    @classmethod
    def zeros(cls, topology: MlpTopology, dtype=np.float64):
        shapes = topology.layer_shapes()
        return cls(tuple(np.zeros(s, dtype=dtype) for s in shapes),
                   tuple(np.zeros(s[1], dtype=dtype) for s in shapes))

    def matches(self, topology: MlpTopology) -> bool:
        return [W.shape for W in self.weights] == topology.layer_shapes()


def init_parameters(topology: MlpTopology, rng: np.random.Generator) -> MlpParameters:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in topology.layer_shapes():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParameters(tuple(weights), tuple(biases))


# ─── Forward / loss / backward ───────────────────────────────────────────────

def crelu(x):
    x = np.asarray(x)
    return np.concatenate([np.maximum(x, 0), np.maximum(-x, 0)], axis=-1)


def relu(x):
    return np.maximum(np.asarray(x), 0)


def _activate(z, activation):
    return crelu(z) if activation == 'crelu' else relu(z)


def _activation_grad(z, upstream, activation):
    if activation == 'crelu':
        n = z.shape[-1]
        return upstream[..., :n] * (z > 0) - upstream[..., n:] * (z < 0)
    return upstream * (z > 0)


def dropout_masks(topology: MlpTopology, batch: int, rate: float, rng: np.random.Generator,
                  dtype=np.float64) -> List[np.ndarray]:
    """Inverted-dropout masks: 0 with probability `rate`, 1/(1-rate) otherwise."""
    keep = 1.0 - rate
    return [((rng.random((batch, topology.hidden_units)) >= rate) / keep).astype(dtype)
            for _ in range(topology.hidden_layers)]


def _run(p: MlpParameters, X: np.ndarray, masks, activation):
    inputs, pre = [], []
    a = X
    last = len(p.weights) - 1
    for k, (W, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(a)
        z = a @ W + b
        if k == last:
            return z, inputs, pre
        if masks is not None:
            z = z * masks[k]
        pre.append(z)
        a = _activate(z, activation)


def _check_input(p: MlpParameters, X):
    X = np.asarray(X)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.ndim != 2 or X2.shape[1] != p.weights[0].shape[0]:
        raise InvalidArgument(f'input has {X2.shape[-1]} features, network expects {p.weights[0].shape[0]}')
    return X2, single


def forward(p: MlpParameters, x, dropout_mask=None, activation: str = 'crelu') -> np.ndarray:
    """Outputs (vx, vy, px, py); no mask means inference mode."""
    X, single = _check_input(p, x)
    out, _, _ = _run(p, X, dropout_mask, activation)
    return out[0] if single else out


def loss(outputs, targets) -> float:
    outputs = np.asarray(outputs)
    targets = np.asarray(targets)
    if outputs.shape != targets.shape or outputs.shape[-1] != OUTPUT_DIM:
        raise InvalidArgument(f'outputs {outputs.shape} and targets {targets.shape} must match with 4 columns')
    return float(np.mean((outputs - targets) ** 2))


def objective(p: MlpParameters, X, Y, masks=None, weight_decay=0.0, activation='crelu') -> float:
    out = forward(p, X, masks, activation)
    decay = 0.5 * weight_decay * sum(float(np.sum(W * W)) for W in p.weights)
    return loss(out, Y) + decay


def gradient(p: MlpParameters, X, Y, masks=None, weight_decay: float = 0.0,
             activation: str = 'crelu') -> Tuple[MlpParameters, float]:
    """Exact gradient of batch-mean MSE + weight_decay * 0.5 * |W|^2 (biases undecayed)."""
    X, _ = _check_input(p, X)
    Y = np.asarray(Y, dtype=X.dtype).reshape(X.shape[0], -1)
    if X.shape[0] == 0:
        raise InvalidArgument('gradient needs a non-empty batch')
    out, inputs, pre = _run(p, X, masks, activation)
    value = loss(out, Y) + 0.5 * weight_decay * sum(float(np.sum(W * W)) for W in p.weights)

    delta = 2.0 * (out - Y) / out.size
    gW: List[np.ndarray] = [None] * len(p.weights)
    gb: List[np.ndarray] = [None] * len(p.weights)
    for k in range(len(p.weights) - 1, -1, -1):
        gW[k] = inputs[k].T @ delta + weight_decay * p.weights[k]
        gb[k] = delta.sum(axis=0)
        if k == 0:
            break
        upstream = delta @ p.weights[k].T
        delta = _activation_grad(pre[k - 1], upstream, activation)
        if masks is not None:
            delta = delta * masks[k - 1]
    return MlpParameters(tuple(gW), tuple(gb)), value


# ─── Adam ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AdamState:
    m: Tuple[np.ndarray, ...]
    v: Tuple[np.ndarray, ...]
    step: int = 0

    @classmethod
    def fresh(cls, p: MlpParameters):
        arrays = p.arrays()
        return cls(tuple(np.zeros_like(a) for a in arrays), tuple(np.zeros_like(a) for a in arrays), 0)


def adam_step(p: MlpParameters, grads: MlpParameters, state: AdamState,
              cfg: TrainConfig) -> Tuple[MlpParameters, AdamState]:
    params, g = p.arrays(), grads.arrays()
    if len(state.m) != len(params) or any(m.shape != a.shape for m, a in zip(state.m, params)):
        raise InvalidArgument('adam state does not match the parameters')
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = [], [], []
    for a, ga, m, v in zip(params, g, state.m, state.v):
        m = b1 * m + (1.0 - b1) * ga
        v = b2 * v + (1.0 - b2) * ga * ga
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(a - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps))
        new_m.append(m)
        new_v.append(v)
    n = len(p.weights)
    return (MlpParameters(tuple(new_p[:n]), tuple(new_p[n:])),
            AdamState(tuple(new_m), tuple(new_v), t))


# ─── Models ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class MlpModel:
    topology: MlpTopology
    params: MlpParameters
    feature_means: np.ndarray = field(repr=False)
    feature_stds: np.ndarray = field(repr=False)
    layout_version: str = ''
    train_meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.params.matches(self.topology):
            raise InvalidArgument('parameters do not match the topology')
        means = np.asarray(self.feature_means, dtype=np.float64)
        stds = np.asarray(self.feature_stds, dtype=np.float64)
        if means.shape != (self.topology.input_dim,) or stds.shape != means.shape:
            raise InvalidArgument('standardization vectors must have input_dim entries')
        object.__setattr__(self, 'feature_means', means)
        object.__setattr__(self, 'feature_stds', stds)

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.feature_means) / self.feature_stds

    def predict(self, X) -> np.ndarray:
        return forward(self.params, self.standardize(X), activation=self.topology.activation)

    def to_dict(self):
        return {
            'layout_version': self.layout_version,
            'topology': self.topology.to_dict(),
            'feature_standardization': {'means': self.feature_means.tolist(),
                                        'stds': self.feature_stds.tolist()},
            'layers': [{'weights': W.ravel().tolist(), 'bias': b.tolist()}
                       for W, b in zip(self.params.weights, self.params.biases)],
            'train_meta': dict(self.train_meta),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            topology = MlpTopology.from_dict(data['topology'])
            shapes = topology.layer_shapes()
            layers = data['layers']
            if len(layers) != len(shapes):
                raise FormatError(f'{len(layers)} layers for a {len(shapes)}-layer topology')
            weights = tuple(np.array(l['weights'], dtype=np.float64).reshape(s) for l, s in zip(layers, shapes))
            biases = tuple(np.array(l['bias'], dtype=np.float64) for l in layers)
            std = data['feature_standardization']
            return cls(topology, MlpParameters(weights, biases), std['means'], std['stds'],
                       layout_version=data.get('layout_version', ''), train_meta=data.get('train_meta', {}))
        except (KeyError, ValueError, TypeError) as e:
            raise FormatError(f'bad model document: {e}') from e


def save_model(path, model: MlpModel):
    write_json(path, model.to_dict())


def load_model(path) -> MlpModel:
    return MlpModel.from_dict(read_json(path))


# ─── Training ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    targets: Tuple[float, float, float, float]
    layout_version: str = ''
    vehicle_id: str = ''
    drive_id: str = ''
    distance: Optional[float] = None
    last_frame_area: Optional[float] = None


def stack_samples(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray, str]:
    if not samples:
        raise InvalidArgument('empty sample set')
    layouts = {s.layout_version for s in samples}
    if len(layouts) > 1:
        raise InvalidArgument(f'mixed feature layouts {sorted(layouts)}')
    X = np.vstack([np.asarray(s.features, dtype=np.float64) for s in samples])
    Y = np.array([s.targets for s in samples], dtype=np.float64)
    return X, Y, layouts.pop()


def velocity_mse(outputs, targets) -> float:
    """Mean over samples of the squared velocity error norm."""
    diff = np.asarray(outputs)[:, :2] - np.asarray(targets)[:, :2]
    return float(np.mean(np.sum(diff * diff, axis=1)))


def standardization(X: np.ndarray):
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds[stds == 0] = 1.0
    return means, stds


def train(train_set: Sequence[Sample], val_set: Sequence[Sample], topology: MlpTopology,
          cfg: TrainConfig, tag: str = '') -> Tuple[MlpModel, List[dict]]:
    """Returns the model of the best validation-velocity epoch and the per-epoch history."""
    if not train_set or not val_set:
        raise InvalidArgument('train and validation sets must both be non-empty')
    X, Y, layout = stack_samples(train_set)
    Xv, Yv, val_layout = stack_samples(val_set)
    if val_layout != layout:
        raise InvalidArgument(f'validation layout {val_layout!r} differs from training layout {layout!r}')
    if X.shape[1] != topology.input_dim:
        raise InvalidArgument(f'features have {X.shape[1]} columns, topology expects {topology.input_dim}')

    rng = np.random.default_rng(cfg.rng_seed)
    means, stds = standardization(X)
    Xs = (X - means) / stds
    Xvs = (Xv - means) / stds
    params = init_parameters(topology, rng)
    state = AdamState.fresh(params)
    n = len(Xs)

    best_params, best_mse, best_epoch = params, np.inf, -1
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = dropout_masks(topology, len(idx), cfg.dropout_rate, rng) if cfg.dropout_rate > 0 else None
            grads, value = gradient(params, Xs[idx], Y[idx], masks, cfg.weight_decay, topology.activation)
            params, state = adam_step(params, grads, state, cfg)
            batch_losses.append(value)
        val = velocity_mse(forward(params, Xvs, activation=topology.activation), Yv)
        history.append({'epoch': epoch, 'train_loss': float(np.mean(batch_losses)), 'val_velocity_mse': val})
        if val < best_mse:
            best_params, best_mse, best_epoch = params, val, epoch
        elif epoch - best_epoch >= cfg.early_stop_patience:
            log.debug(f'{tag} early stop at epoch {epoch} (best {best_epoch})')
            break

    log.info(f'{tag or "model"} {topology.hidden_layers}x{topology.hidden_units} '
             f'best epoch={best_epoch} val_mse={best_mse:.4f}')
    model = MlpModel(topology, best_params, means, stds, layout_version=layout,
                     train_meta={'seed': cfg.rng_seed, 'best_epoch': best_epoch, 'val_mse': best_mse,
                                 'epochs_run': len(history)})
    return model, history


# ─── Gradient oracle ─────────────────────────────────────────────────────────

def _kink_pattern(p: MlpParameters, X, masks, activation):
    _, _, pre = _run(p, X, masks, activation)
    return [np.sign(z) for z in pre]


def check_gradients(topology: MlpTopology, seed: int, eps: float = 1e-5, dtype=np.float64,
                    params: Optional[MlpParameters] = None, batch: Optional[Tuple] = None,
                    weight_decay: float = 1e-5, dropout_rate: float = 0.2) -> Tuple[float, int]:
    """
    Analytic gradient vs. central differences with one fixed dropout mask.

    Returns (max |analytic - numeric| / max(1, |numeric|), skipped components).
    Components whose ±eps perturbation flips any hidden rectifier are skipped.
    """
    if topology.parameter_count > 10_000:
        raise InvalidArgument(f'{topology.parameter_count} parameters is too many for a brute-force check')
    rng = np.random.default_rng(seed)
    p = (params if params is not None else init_parameters(topology, rng)).astype(dtype)
    if batch is None:
        X = rng.standard_normal((8, topology.input_dim))
        Y = rng.standard_normal((8, topology.output_dim))
    else:
        X, Y = batch
    X = np.asarray(X, dtype=dtype)
    Y = np.asarray(Y, dtype=dtype)
    masks = dropout_masks(topology, len(X), dropout_rate, rng, dtype=dtype) if dropout_rate > 0 else None

    grads, _ = gradient(p, X, Y, masks, weight_decay, topology.activation)
    base = _kink_pattern(p, X, masks, topology.activation)
    arrays = p.arrays()
    analytic = grads.arrays()
    n_w = len(p.weights)
    worst, skipped = 0.0, 0
    for a_idx, arr in enumerate(arrays):
        for flat in range(arr.size):
            values = []
            crossed = False
            for sign in (1, -1):
                probe = [x.copy() for x in arrays]
                probe[a_idx].flat[flat] += sign * eps
                q = MlpParameters(tuple(probe[:n_w]), tuple(probe[n_w:]))
                pattern = _kink_pattern(q, X, masks, topology.activation)
                crossed |= any(np.any(s != b) for s, b in zip(pattern, base))
                values.append(objective(q, X, Y, masks, weight_decay, topology.activation))
            if crossed:
                skipped += 1
                continue
            numeric = (values[0] - values[1]) / (2.0 * eps)
            err = abs(float(analytic[a_idx].flat[flat]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    log.debug(f'gradcheck seed={seed} max_rel_err={worst:.3e} skipped={skipped}')
    return worst, skipped
