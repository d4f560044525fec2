"""Feedforward regressor from normalized keypoints to a distance distribution.

The network is a ReLU MLP with dropout.  Its raw outputs are mapped to
distribution parameters:

* ``johnson_su``: (gamma raw, delta = softplus + eps, lam = softplus + eps,
  anchor).  With the default ``head="median"`` the anchor is the distribution
  median and ``xi = anchor + lam * sinh(gamma / delta)``; with
  ``head="location"`` the anchor is ``xi`` itself.
* ``gaussian`` / ``laplace``: (scale = softplus + eps, mu raw)

Gradients are computed by hand (reverse mode) and the optimizer is Adam.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, TextIO

import numpy as np
from scipy.special import ndtri

from . import distributions as D
from ._nn import Adam, he_uniform, sigmoid, softplus
from .geometry import NUM_JOINTS, CameraIntrinsics, Keypoints2D, normalize_keypoints

JOHNSON_SU = "johnson_su"
GAUSSIAN = "gaussian"
LAPLACE = "laplace"
LOSS_KINDS = (JOHNSON_SU, GAUSSIAN, LAPLACE)
MEDIAN_HEAD = "median"
LOCATION_HEAD = "location"

MODEL_FORMAT = "pedloc-locnet"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class LocNetConfig:
    input_dim: int = 3 * NUM_JOINTS
    hidden_dim: int = 256
    num_hidden_layers: int = 2
    dropout_rate: float = 0.2
    loss_kind: str = JOHNSON_SU
    positivity_eps: float = 1e-4
    nll_mode: str = D.STANDARD
    # gamma = gamma_bound * tanh(raw) when set; None leaves gamma unconstrained
    gamma_bound: Optional[float] = None
    head: str = "median"
    anchor_transform: str = "identity"

    def validate(self):
        if self.input_dim <= 0 or self.hidden_dim <= 0 or self.num_hidden_layers < 0:
            raise ValueError("layer dimensions must be > 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.nll_mode not in D.NLL_MODES:
            raise ValueError(f"unknown nll_mode {self.nll_mode!r}")
        if self.positivity_eps < 0:
            raise ValueError("positivity_eps must be >= 0")
        if self.gamma_bound is not None and not self.gamma_bound > 0:
            raise ValueError("gamma_bound must be > 0")
        if self.head not in (MEDIAN_HEAD, LOCATION_HEAD):
            raise ValueError(f"unknown head {self.head!r}")
        if self.anchor_transform not in ("identity", "exp"):
            raise ValueError(f"unknown anchor_transform {self.anchor_transform!r}")

    @property
    def output_dim(self):
        return 4 if self.loss_kind == JOHNSON_SU else 2


@dataclass(frozen=True)
class TrainSpec:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    # multiplicative learning-rate factor applied after every epoch
    lr_decay: float = 1.0

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("learning_rate, batch_size and max_epochs must be > 0")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")


@dataclass(eq=False)
class LocNetModel:
    config: LocNetConfig
    weights: list
    biases: list
    metadata: dict = field(default_factory=dict)

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return LocNetModel(self.config, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], dict(self.metadata))

    def __eq__(self, other):
        if not isinstance(other, LocNetModel):
            return NotImplemented
        return (self.config == other.config and self.metadata == other.metadata
                and len(self.weights) == len(other.weights)
                and all(np.array_equal(a, b) for a, b in zip(self.params(), other.params())))


def init_model(config: LocNetConfig = LocNetConfig(), seed: int = 0,
               mean_distance: Optional[float] = None) -> LocNetModel:
    config.validate()
    rng = np.random.default_rng(seed)
    dims = [config.input_dim] + [config.hidden_dim] * config.num_hidden_layers + [config.output_dim]
    weights = [he_uniform(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    if mean_distance is not None:
        biases[-1][-1] = math.log(mean_distance) if config.anchor_transform == "exp" else mean_distance
    return LocNetModel(config, weights, biases, {"init_seed": seed})


def build_input(kp: Keypoints2D, k: CameraIntrinsics) -> np.ndarray:
    """51-element network input: 34 normalized coordinates then 17 visibility flags."""
    coords, mask = normalize_keypoints(kp, k)
    return np.concatenate([coords, mask])


# ---------------------------------------------------------------------------
# forward / backward


def _check_inputs(model, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise ValueError(f"expected input dim {model.config.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain NaN or Inf")
    return x


def _forward_raw(model, x, dropout_rng=None):
    """Returns raw outputs plus the cache needed for backprop."""
    acts = [x]
    masks = []
    h = x
    rate = model.config.dropout_rate
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        pre = h @ w + b
        h = np.maximum(pre, 0.0)
        if dropout_rng is not None and rate > 0:
            keep = (dropout_rng.random(h.shape) >= rate) / (1.0 - rate)
            h = h * keep
            masks.append(keep)
        else:
            masks.append(None)
        acts.append(h)
    raw = h @ model.weights[-1] + model.biases[-1]
    return raw, acts, masks


def _head(config, raw):
    """Map raw outputs to distribution parameters.

    Returns ``(params, backprop)`` where ``backprop(d_params)`` gives the
    gradient with respect to ``raw``.
    """
    eps = config.positivity_eps
    if config.anchor_transform == "exp":
        anchor = np.exp(np.minimum(raw[:, -1], 50.0))
        d_anchor = anchor
    else:
        anchor = raw[:, -1]
        d_anchor = None
    if config.loss_kind != JOHNSON_SU:
        sig = sigmoid(raw[:, 0])
        params = (anchor, softplus(raw[:, 0]) + eps)

        def backprop(d):
            g = np.empty_like(raw)
            g[:, 0] = d[1] * sig
            g[:, 1] = d[0] if d_anchor is None else d[0] * d_anchor
            return g
        return params, backprop

    if config.gamma_bound is None:
        gamma, d_gamma = raw[:, 0], None
    else:
        t = np.tanh(raw[:, 0])
        gamma, d_gamma = config.gamma_bound * t, config.gamma_bound * (1.0 - t * t)
    sig_d, sig_l = sigmoid(raw[:, 1]), sigmoid(raw[:, 2])
    delta = softplus(raw[:, 1]) + eps
    lam = softplus(raw[:, 2]) + eps
    if config.head == MEDIAN_HEAD:
        ratio = gamma / delta
        sh, ch = np.sinh(ratio), np.cosh(ratio)
        xi = anchor + lam * sh
    else:
        xi = anchor

    def backprop(d):
        dg, dd, dl, dx = d
        if config.head == MEDIAN_HEAD:
            dg = dg + dx * lam * ch / delta
            dd = dd - dx * lam * ch * ratio / delta
            dl = dl + dx * sh
        g = np.empty_like(raw)
        g[:, 0] = dg if d_gamma is None else dg * d_gamma
        g[:, 1] = dd * sig_d
        g[:, 2] = dl * sig_l
        g[:, 3] = dx if d_anchor is None else dx * d_anchor
        return g
    return (gamma, delta, lam, xi), backprop


def _raw_to_params(config, raw):
    return _head(config, raw)[0]


def predict_params(model: LocNetModel, x) -> tuple:
    """Distribution parameters for a batch (dropout off), as arrays."""
    x = _check_inputs(model, x)
    raw, _, _ = _forward_raw(model, x)
    return _raw_to_params(model.config, raw)


def forward(model: LocNetModel, x):
    """Single-sample forward pass returning a params dataclass."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("forward takes a single input vector")
    params = [float(p[0]) for p in predict_params(model, x)]
    if model.config.loss_kind == JOHNSON_SU:
        return D.JohnsonSuParams(*params)
    return D.SymmetricParams(*params)


def point_estimate(model: LocNetModel, x) -> np.ndarray:
    """Distance estimate per row: the anchor output (median or xi) or mu."""
    x = _check_inputs(model, x)
    raw, _, _ = _forward_raw(model, x)
    params = _raw_to_params(model.config, raw)
    if model.config.loss_kind != JOHNSON_SU:
        return params[0]
    if model.config.head == MEDIAN_HEAD:
        return np.exp(np.minimum(raw[:, -1], 50.0)) if model.config.anchor_transform == "exp" else raw[:, -1]
    return params[3]


def _loss_terms(config, raw, y):
    """Per-sample loss and d(loss)/d(raw)."""
    params, backprop = _head(config, raw)
    kind = config.loss_kind
    if kind == JOHNSON_SU:
        loss = D.jsu_nll_arrays(y, *params, mode=config.nll_mode)
        d = D.jsu_nll_grad_arrays(y, *params, mode=config.nll_mode)
    elif kind == GAUSSIAN:
        loss = D.gaussian_nll_arrays(y, *params)
        d = D.gaussian_nll_grad_arrays(y, *params)
    else:
        loss = D.laplace_nll_arrays(y, *params)
        d = D.laplace_nll_grad_arrays(y, *params)
    return loss, backprop(d)


def _backward(model, acts, masks, d_raw):
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    d = d_raw
    for layer in range(len(model.weights) - 1, -1, -1):
        grads_w[layer] = acts[layer].T @ d
        grads_b[layer] = d.sum(axis=0)
        if layer == 0:
            break
        d = d @ model.weights[layer].T
        if masks[layer - 1] is not None:
            d = d * masks[layer - 1]
        d = d * (acts[layer] > 0)
    out = []
    for gw, gb in zip(grads_w, grads_b):
        out += [gw, gb]
    return out


def loss_and_grad(model: LocNetModel, x, y, dropout_rng: Optional[np.random.Generator] = None):
    """Mean loss over the batch and its gradient, ordered like ``model.params()``.

    Dropout is applied only when ``dropout_rng`` is given.
    """
    x = _check_inputs(model, x)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) == 0:
        raise ValueError("empty batch")
    if len(y) != len(x):
        raise ValueError("inputs and targets differ in length")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain NaN or Inf")
    raw, acts, masks = _forward_raw(model, x, dropout_rng)
    loss, d_raw = _loss_terms(model.config, raw, y)
    n = len(y)
    return float(loss.mean()), _backward(model, acts, masks, d_raw / n)


def input_jacobian(model: LocNetModel, x) -> np.ndarray:
    """d(distribution params)/d(input) for one sample, shape (n_params, input_dim)."""
    x = _check_inputs(model, x)[:1]
    raw, acts, masks = _forward_raw(model, x)
    params, backprop = _head(model.config, raw)
    rows = []
    for j in range(len(params)):
        unit = [np.zeros(1) for _ in params]
        unit[j][0] = 1.0
        d = backprop(unit)
        for layer in range(len(model.weights) - 1, 0, -1):
            d = (d @ model.weights[layer].T) * (acts[layer] > 0)
        rows.append((d @ model.weights[0].T)[0])
    return np.array(rows)


def mean_loss(model: LocNetModel, x, y) -> float:
    raw, _, _ = _forward_raw(model, _check_inputs(model, x))
    loss, _ = _loss_terms(model.config, raw, np.asarray(y, dtype=float))
    return float(loss.mean())


# ---------------------------------------------------------------------------
# training


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_val_loss: list = field(default_factory=list)
    best_epoch: int = -1


def train(model: LocNetModel, train_set, val_set, spec: TrainSpec = TrainSpec()):
    """Mini-batch Adam with early stopping on validation NLL.

    ``train_set`` and ``val_set`` are ``(inputs, targets)`` pairs.  Returns a
    new model holding the best-validation weights and the loss history.
    """
    spec.validate()
    x_tr, y_tr = _check_inputs(model, train_set[0]), np.asarray(train_set[1], dtype=float)
    x_va, y_va = _check_inputs(model, val_set[0]), np.asarray(val_set[1], dtype=float)
    if len(y_tr) == 0 or len(y_va) == 0:
        raise ValueError("train and validation sets must be non-empty")

    work = model.copy()
    params = work.params()
    opt = Adam(params, lr=spec.learning_rate)
    rng = np.random.default_rng(spec.seed)
    history = History()
    best = None
    best_val = math.inf
    stale = 0
    n = len(y_tr)
    for epoch in range(spec.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            # overflow is reported as TrainingDivergence below rather than as warnings
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grad(work, x_tr[idx], y_tr[idx], dropout_rng=rng)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergence(f"non-finite loss or gradient at epoch {epoch}, batch {start // spec.batch_size}")
            opt.step(grads)
            total += loss * len(idx)
        val = mean_loss(work, x_va, y_va)
        if not math.isfinite(val):
            raise TrainingDivergence(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(total / n)
        history.val_loss.append(val)
        if val < best_val:
            best_val = val
            best = work.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        history.best_val_loss.append(best_val)
        if stale >= spec.patience:
            break
        opt.lr *= spec.lr_decay

    best.metadata.update({
        "train_seed": spec.seed,
        "epochs": len(history.val_loss),
        "best_epoch": history.best_epoch,
        "final_val_loss": best_val,
        "train_spec": asdict(spec),
    })
    return best, history


# ---------------------------------------------------------------------------
# inference


def predict_distance(model: LocNetModel, kp: Keypoints2D, k: CameraIntrinsics, coverage: float = 0.9):
    """Point distance (see :func:`point_estimate`) and the central ``coverage`` interval."""
    x = build_input(kp, k)
    p = forward(model, x)
    lo_q = 0.5 * (1.0 - coverage)
    hi_q = 1.0 - lo_q
    if isinstance(p, D.JohnsonSuParams):
        point = D.jsu_median(p) if model.config.head == MEDIAN_HEAD else p.xi
        return point, (D.jsu_ppf(lo_q, p), D.jsu_ppf(hi_q, p))
    if model.config.loss_kind == GAUSSIAN:
        z = float(ndtri(hi_q))
        return p.mu, (p.mu - z * p.scale, p.mu + z * p.scale)
    # Laplace quantile: mu + b * log(2q) for q < 1/2
    t = -p.scale * math.log(2.0 * lo_q)
    return p.mu, (p.mu - t, p.mu + t)


def predict_intervals(model: LocNetModel, x, coverage: float = 0.9):
    """Vectorized (point, lo, hi, median) for a batch of inputs."""
    params = predict_params(model, x)
    lo_q = 0.5 * (1.0 - coverage)
    if model.config.loss_kind == JOHNSON_SU:
        g, d, l, xi = params
        median = xi + l * np.sinh(-g / d)
        point = median if model.config.head == MEDIAN_HEAD else xi
        return (point, D.jsu_ppf_arrays(lo_q, g, d, l, xi), D.jsu_ppf_arrays(1 - lo_q, g, d, l, xi), median)
    mu, s = params
    half = s * (float(ndtri(1 - lo_q)) if model.config.loss_kind == GAUSSIAN else -math.log(2.0 * lo_q))
    return mu, mu - half, mu + half, mu


# ---------------------------------------------------------------------------
# persistence
#
# JSON document: {"format": "pedloc-locnet", "version": 1, "config": {...},
# "metadata": {...}, "layers": [{"weight": [[...] row-major fan_in x fan_out],
# "bias": [...]}, ...]}.  Layer order is input to output.


def save_model(model: LocNetModel, stream: TextIO):
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": asdict(model.config),
        "metadata": model.metadata,
        "layers": [{"weight": w.tolist(), "bias": b.tolist()}
                   for w, b in zip(model.weights, model.biases)],
    }
    json.dump(doc, stream, sort_keys=True, allow_nan=False)
    stream.write("\n")


def load_model(stream: TextIO) -> LocNetModel:
    try:
        doc = json.load(stream)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt or truncated model file: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a locnet model file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}")
    try:
        config = LocNetConfig(**doc["config"])
        config.validate()
        weights = [np.array(layer["weight"], dtype=float) for layer in doc["layers"]]
        biases = [np.array(layer["bias"], dtype=float) for layer in doc["layers"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid model file: {exc}") from None
    dims = [config.input_dim] + [config.hidden_dim] * config.num_hidden_layers + [config.output_dim]
    if len(weights) != len(dims) - 1:
        raise ModelFormatError("layer count does not match config")
    for w, b, a, o in zip(weights, biases, dims[:-1], dims[1:]):
        if w.shape != (a, o) or b.shape != (o,):
            raise ModelFormatError("layer shape does not match config")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ModelFormatError("non-finite weights")
    return LocNetModel(config, weights, biases, doc.get("metadata", {}))
