"""Flow-matching velocity MLP: training, per-sample probes and the ODE sampler.

Conventions
-----------
The interpolant is ``x_t = (1 - t) x0 + t x1`` with ``x0`` a data point and
``x1 ~ N(0, I)``; ``t = 0`` is data, ``t = 1`` is noise. The regression
target is the constant velocity ``x1 - x0`` and the per-sample loss is the
squared Euclidean error (summed over dimensions, not averaged).

Network input is ``[x (d), t, 1 - t, one_hot(label) (label_count)]``; hidden
layers use tanh, the output layer is linear.

Flat parameter order: layer by layer from input to output, for each layer
the weight matrix of shape ``(fan_in, fan_out)`` in row-major order
followed by its bias vector.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .datasets import Dataset, SubsetManifest, apply_manifest, atomic_write_text
from .errors import InvalidArgumentError, NumericError, ParseError
from .seeding import stream

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (128, 128, 128)
CHECKPOINT_FORMAT = "diffprune-mlp-v1"


@dataclass(frozen=True, eq=False)
class VelocityModel:
    d: int
    hidden_sizes: tuple
    label_count: int
    weights: tuple
    biases: tuple
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.d + 2 + self.label_count

    @property
    def n_params(self) -> int:
        return param_count(self.d, self.hidden_sizes, self.label_count)

    def flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b]
        return np.concatenate(parts)

    def with_flat(self, theta) -> "VelocityModel":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise InvalidArgumentError(f"expected {self.n_params} parameters, got {theta.shape}")
        Ws, bs, pos = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(theta[pos:pos + W.size].reshape(W.shape).copy())
            pos += W.size
            bs.append(theta[pos:pos + b.size].copy())
            pos += b.size
        return VelocityModel(self.d, self.hidden_sizes, self.label_count, tuple(Ws), tuple(bs), self.seed)

    def __call__(self, x, t, labels=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        _, out = _forward(self, _inputs(self, x, t, labels))
        return out


def param_count(d, hidden_sizes, label_count=0) -> int:
    sizes = [d + 2 + label_count, *hidden_sizes, d]
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def init_model(d: int, hidden_sizes=DEFAULT_HIDDEN, label_count: int = 0, seed: int = 0) -> VelocityModel:
    """Glorot-normal weights, zero biases; seeded from the ``init`` stream."""
    rng = stream(seed, "init")
    sizes = [d + 2 + label_count, *hidden_sizes, d]
    Ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        Ws.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out)))
        bs.append(np.zeros(fan_out))
    return VelocityModel(d, tuple(int(h) for h in hidden_sizes), int(label_count), tuple(Ws), tuple(bs), int(seed))


def _inputs(model, x, t, labels):
    B = x.shape[0]
    if x.shape[1] != model.d:
        raise InvalidArgumentError(f"model expects d={model.d}, got {x.shape[1]}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    cols = [x, t[:, None], 1.0 - t[:, None]]
    if model.label_count:
        onehot = np.zeros((B, model.label_count))
        if labels is not None:
            onehot[np.arange(B), np.broadcast_to(np.asarray(labels, dtype=np.int64), (B,))] = 1.0
        cols.append(onehot)
    return np.concatenate(cols, axis=1)


def _forward(model, h):
    acts = [h]
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ W + b
        if l == last:
            return acts, z
        acts.append(np.tanh(z))


def _backward(model, acts, g_out):
    """Gradients w.r.t. each layer's pre-activation, per row of the batch."""
    deltas = [g_out]
    for l in range(len(model.weights) - 1, 0, -1):
        a = acts[l]
        deltas.append((deltas[-1] @ model.weights[l].T) * (1.0 - a * a))
    return deltas[::-1]


@dataclass
class _Probe:
    acts: list
    deltas: list
    losses: np.ndarray


def _probe(model, X, noise, t, labels=None) -> _Probe:
    """Per-row losses and backprop terms; ``deltas`` are unscaled per-sample gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    t_arr = np.asarray(t, dtype=np.float64)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(noise)) and np.all(np.isfinite(t_arr))):
        raise NumericError("non-finite input to loss probe")
    tcol = np.broadcast_to(t_arr, (X.shape[0],))[:, None]
    xt = (1.0 - tcol) * X + tcol * noise
    acts, out = _forward(model, _inputs(model, xt, tcol[:, 0], labels))
    resid = out - (noise - X)
    return _Probe(acts, _backward(model, acts, 2.0 * resid), (resid * resid).sum(1))


def per_sample_loss(model, x0, noise, t, label=None) -> float:
    """Squared velocity error ``|v(x_t, t) - (noise - x0)|^2`` for one sample."""
    return float(_probe(model, x0, noise, t, None if label is None else [label]).losses[0])


def per_sample_grad(model, x0, noise, t, label=None) -> np.ndarray:
    """Exact parameter gradient of :func:`per_sample_loss`, in flat parameter order."""
    p = _probe(model, x0, noise, t, None if label is None else [label])
    parts = []
    for a, dlt in zip(p.acts, p.deltas):
        parts += [np.outer(a[0], dlt[0]).ravel(), dlt[0]]
    return np.concatenate(parts)


def probe_losses(model, X, noise, t, labels=None) -> np.ndarray:
    return _probe(model, X, noise, t, labels).losses


def probe_grad_norms(model, X, noise, t, labels=None) -> np.ndarray:
    """Per-sample parameter-gradient L2 norms without materialising the gradients.

    A weight gradient is the outer product ``a delta^T``, whose Frobenius norm
    squared is ``|a|^2 |delta|^2``.
    """
    p = _probe(model, X, noise, t, labels)
    sq = np.zeros(len(p.losses))
    for a, dlt in zip(p.acts, p.deltas):
        dd = (dlt * dlt).sum(1)
        sq += (a * a).sum(1) * dd + dd
    return np.sqrt(sq)


def probe_grad_mean_dots(model, X, noise, t, labels=None) -> np.ndarray:
    """``<g_i, mean_j g_j>`` for every row, where ``g_i`` is the per-sample gradient."""
    p = _probe(model, X, noise, t, labels)
    n = len(p.losses)
    dots = np.zeros(n)
    for a, dlt in zip(p.acts, p.deltas):
        Gw = a.T @ dlt / n
        gb = dlt.mean(0)
        dots += ((a @ Gw) * dlt).sum(1) + dlt @ gb
    return dots


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 256
    learning_rate: float = 2e-3
    seed: int = 0
    pretrain_epochs: int = 5
    probe_timestep: float = 0.1
    log_every: int = 100
    lr_schedule: str = "linear"  # "linear" decays to 0 over ``steps``; "constant"

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgumentError("steps must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if not 0.0 < self.probe_timestep < 1.0:
            raise InvalidArgumentError("probe_timestep must lie in (0, 1)")
        if self.learning_rate < 0:
            raise InvalidArgumentError("learning_rate must be >= 0")
        if self.lr_schedule not in ("linear", "constant"):
            raise InvalidArgumentError(f"unknown lr_schedule {self.lr_schedule!r}")


class _Adam:
    def __init__(self, theta, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.theta = theta.copy()
        self.m = np.zeros_like(theta)
        self.v = np.zeros_like(theta)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.k = 0

    def step(self, g):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.k)
        vh = self.v / (1 - self.b2**self.k)
        self.theta = self.theta - self.lr * mh / (np.sqrt(vh) + self.eps)


def batch_gradient(model, X, noise, t, labels=None):
    """Mean loss over the rows and its flat parameter gradient."""
    p = _probe(model, X, noise, t, labels)
    B = len(p.losses)
    parts = []
    for a, dlt in zip(p.acts, p.deltas):
        parts += [(a.T @ dlt).ravel() / B, dlt.mean(0)]
    return float(p.losses.mean()), np.concatenate(parts)


def _batch_grad(model, X, labels, rng):
    B, d = X.shape
    t = rng.random(B)
    noise = rng.standard_normal((B, d))
    return batch_gradient(model, X, noise, t, labels)


class _Fitter:
    """Shared Adam loop for ``train`` and ``pretrain_trace``."""

    def __init__(self, model, X, labels, cfg, rng):
        self.model, self.X, self.labels, self.cfg, self.rng = model, X, labels, cfg, rng
        self.opt = _Adam(model.flat(), cfg.learning_rate)

    def step(self, rows) -> float:
        lab = None if self.labels is None else self.labels[rows]
        loss, g = _batch_grad(self.model, self.X[rows], lab, self.rng)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {self.opt.k + 1}")
        self.opt.step(g)
        if not np.all(np.isfinite(self.opt.theta)):
            raise NumericError(f"non-finite parameters after step {self.opt.k}")
        self.model = self.model.with_flat(self.opt.theta)
        return loss


def _labels_for(model, ds):
    if not model.label_count:
        return None
    if ds.labels is None:
        raise InvalidArgumentError("conditional model needs a labelled dataset")
    return ds.labels


def train(model: VelocityModel, ds: Dataset, manifest: SubsetManifest, cfg: TrainConfig):
    """Fit ``model`` on the manifest's kept samples.

    Returns ``(trained_model, window_losses)`` where ``window_losses[j]`` is the
    mean minibatch loss over steps ``[j * log_every, (j + 1) * log_every)``.
    """
    if len(manifest) == 0:
        raise InvalidArgumentError("pruned to zero samples")
    sub = apply_manifest(ds, manifest)
    labels = _labels_for(model, sub)
    rng = stream(cfg.seed, "train")
    fit = _Fitter(model, sub.features, labels, cfg, rng)
    bs = min(cfg.batch_size, sub.n)
    losses = np.empty(cfg.steps)
    for s in range(cfg.steps):
        if cfg.lr_schedule == "linear":
            fit.opt.lr = cfg.learning_rate * (1.0 - s / cfg.steps)
        losses[s] = fit.step(rng.choice(sub.n, size=bs, replace=False))
    w = max(1, cfg.log_every)
    windows = [float(losses[i:i + w].mean()) for i in range(0, cfg.steps, w)]
    return fit.model, np.array(windows)


@dataclass
class LossTrace:
    losses: np.ndarray  # n x E
    noise: np.ndarray  # n x d, fixed probe noise reused every epoch
    probe_timestep: float
    final_model: Optional[VelocityModel] = field(default=None, repr=False)

    @property
    def epochs(self) -> int:
        return self.losses.shape[1]


def probe_noise(n, d, seed) -> np.ndarray:
    return stream(seed, "probe-noise").standard_normal((n, d))


def pretrain_trace(model: VelocityModel, ds: Dataset, cfg: TrainConfig, noise=None) -> LossTrace:
    """Short pretraining; record each sample's probe loss at the end of every epoch.

    Probe losses use the fixed timestep ``cfg.probe_timestep`` and one noise
    vector per sample drawn once (``probe-noise`` stream), so columns are
    comparable across epochs.
    """
    E = cfg.pretrain_epochs
    if E < 2:
        raise InvalidArgumentError("pretrain_epochs must be >= 2 to observe loss changes")
    labels = _labels_for(model, ds)
    if noise is None:
        noise = probe_noise(ds.n, ds.d, cfg.seed)
    rng = stream(cfg.seed, "pretrain")
    fit = _Fitter(model, ds.features, labels, cfg, rng)
    bs = min(cfg.batch_size, ds.n)
    trace = np.empty((ds.n, E))
    for e in range(E):
        order = rng.permutation(ds.n)
        for start in range(0, ds.n, bs):
            fit.step(order[start:start + bs])
        trace[:, e] = probe_losses(fit.model, ds.features, noise, cfg.probe_timestep, labels)
    return LossTrace(trace, noise, cfg.probe_timestep, fit.model)


def heun_integrate(field: Callable, x, steps: int, t_start: float = 1.0, t_end: float = 0.0) -> np.ndarray:
    """Fixed-step Heun integration of ``dx/dt = field(x, t)`` from ``t_start`` to ``t_end``."""
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    x = np.array(x, dtype=np.float64)
    ts = np.linspace(t_start, t_end, steps + 1)
    for i in range(steps):
        t0, t1 = ts[i], ts[i + 1]
        h = t1 - t0
        v0 = field(x, t0)
        xe = x + h * v0
        x = x + 0.5 * h * (v0 + field(xe, t1))
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite ODE state at step {i + 1} (t={t1:.4g})")
    return x


def sample_ode(model: VelocityModel, count: int, steps: int = 50, seed: int = 0, labels=None) -> np.ndarray:
    """Generate ``count`` samples by integrating the learned field from noise (t=1) to data (t=0)."""
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    x1 = stream(seed, "sample").standard_normal((count, model.d))
    if model.label_count and labels is None:
        labels = stream(seed, "sample-labels").integers(0, model.label_count, size=count)
    return heun_integrate(lambda x, t: model(x, t, labels), x1, steps)


def save_model(model: VelocityModel, path):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "d": model.d,
        "hidden_sizes": list(model.hidden_sizes),
        "label_count": model.label_count,
        "seed": model.seed,
        "params": model.flat().tolist(),
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True) + "\n")


def load_model(path) -> VelocityModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ParseError(f"unknown checkpoint format {doc.get('format')!r}")
        shell = init_model(int(doc["d"]), tuple(doc["hidden_sizes"]), int(doc["label_count"]), int(doc["seed"]))
        return shell.with_flat(np.array(doc["params"], dtype=np.float64))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed checkpoint {path}: {exc}") from exc
