"""Small MLP velocity networks with hand-written reverse-mode gradients.

A network maps ``(x, t, cond)`` to a vector of the same dimension as ``x``.
The input of the first layer is ``[x, sin(2 pi 2^k t), cos(2 pi 2^k t), cond]``
for ``k = 0..n_freq-1``. All arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, StateError
from .rng import RngState, as_generator

ACTIVATIONS = ("silu", "tanh")


@dataclass(frozen=True)
class NetConfig:
    dim: int
    cond_dim: int = 0
    hidden: tuple[int, ...] = (64, 64)
    n_freq: int = 4
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.dim < 1 or self.cond_dim < 0 or self.n_freq < 0:
            raise ConfigError(f"invalid network dimensions: {self}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive: {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.dim + 2 * self.n_freq + self.cond_dim

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(rows, cols) = (fan_out, fan_in) for each linear layer."""
        dims = [self.in_dim, *self.hidden, self.dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def param_count(self) -> int:
        return sum(r * c + r for r, c in self.layer_shapes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetConfig:
        return cls(**{**d, "hidden": tuple(d.get("hidden", ()))})


def time_features(t: np.ndarray, n_freq: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = 2.0 ** np.arange(n_freq, dtype=np.float64)
    ang = 2.0 * np.pi * t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "silu":
        return z / (1.0 + np.exp(-z))
    return np.tanh(z)


def _act_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    return 1.0 - np.tanh(z) ** 2


class GradientBuffer:
    """One array per parameter tensor, mirroring the owner's layout."""

    def __init__(self, arrays: Sequence[np.ndarray]):
        self.arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> GradientBuffer:
        return cls([np.zeros_like(a) for a in arrays])

    def zero_(self) -> None:
        for a in self.arrays:
            a[...] = 0.0

    def add_(self, other: GradientBuffer, scale: float = 1.0) -> GradientBuffer:
        for a, b in zip(self.arrays, other.arrays):
            a += scale * b
        return self

    def scale_(self, c: float) -> GradientBuffer:
        for a in self.arrays:
            a *= c
        return self

    def flat(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.arrays])

    def is_zero(self) -> bool:
        return all(not np.any(a) for a in self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def __iter__(self):
        return iter(self.arrays)


class ParameterSet:
    """Shared flat-vector access for anything that owns a list of parameter arrays."""

    params: list[np.ndarray]

    def flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params:
            raise ConfigError(f"flat vector has {vec.size} entries, expected {self.num_params}")
        i = 0
        for p in self.params:
            p[...] = vec[i : i + p.size].reshape(p.shape)
            i += p.size

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def zero_grads(self) -> GradientBuffer:
        return GradientBuffer.zeros_like(self.params)


@dataclass
class ForwardRecord:
    """Intermediates of one batched forward pass, consumed by :func:`backward`."""

    config: NetConfig
    inputs: list[np.ndarray]  # input to each linear layer
    pre: list[np.ndarray]  # pre-activation of each hidden layer
    weights: list[np.ndarray]  # effective weights used
    adapters: object | None = None

    @property
    def hidden(self) -> list[np.ndarray]:
        """Post-activation hidden states, one per hidden layer."""
        return self.inputs[1:]


@dataclass
class Gradients:
    params: GradientBuffer
    x: np.ndarray
    cond: np.ndarray | None = None
    adapters: GradientBuffer | None = None


class VelocityNet(ParameterSet):
    def __init__(self, config: NetConfig, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        shapes = config.layer_shapes
        if len(weights) != len(shapes) or len(biases) != len(shapes):
            raise ConfigError("layer count does not match config")
        self.config = config
        self.params = []
        for (r, c), w, b in zip(shapes, weights, biases):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64).reshape(-1)
            if w.shape != (r, c) or b.shape != (r,):
                raise ConfigError(f"layer shape {w.shape}/{b.shape}, expected {(r, c)}/{(r,)}")
            self.params += [w, b]

    @classmethod
    def init(cls, config: NetConfig, rng: RngState | np.random.Generator | int) -> VelocityNet:
        gen = as_generator(rng)
        ws, bs = [], []
        for r, c in config.layer_shapes:
            lim = np.sqrt(6.0 / (r + c))
            ws.append(gen.uniform(-lim, lim, size=(r, c)))
            bs.append(np.zeros(r))
        return cls(config, ws, bs)

    @classmethod
    def zeros(cls, config: NetConfig) -> VelocityNet:
        shapes = config.layer_shapes
        return cls(config, [np.zeros(s) for s in shapes], [np.zeros(s[0]) for s in shapes])

    @property
    def weights(self) -> list[np.ndarray]:
        return self.params[0::2]

    @property
    def biases(self) -> list[np.ndarray]:
        return self.params[1::2]

    @property
    def n_layers(self) -> int:
        return len(self.config.layer_shapes)

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names

    def copy(self) -> VelocityNet:
        return VelocityNet(self.config, self.weights, self.biases)

    def _inputs(self, x, t, cond) -> np.ndarray:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != cfg.dim:
            raise ConfigError(f"state has shape {x.shape}, expected (n, {cfg.dim})")
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64).reshape(-1)
        if t.shape != (n,):
            raise ConfigError(f"time has shape {t.shape}, expected ({n},)")
        parts = [x, time_features(t, cfg.n_freq)]
        if cfg.cond_dim:
            if cond is None:
                raise ConfigError(f"network expects a condition of dimension {cfg.cond_dim}")
            cond = np.asarray(cond, dtype=np.float64)
            if cond.ndim == 1:
                cond = np.broadcast_to(cond, (n, cond.shape[0]))
            if cond.shape != (n, cfg.cond_dim):
                raise ConfigError(f"condition has shape {cond.shape}, expected ({n}, {cfg.cond_dim})")
            parts.append(cond)
        elif cond is not None and np.size(cond) > 0:
            raise ConfigError("network has no condition input")
        return np.concatenate(parts, axis=1)

    def forward_record(self, x, t, cond=None, adapters=None) -> tuple[np.ndarray, ForwardRecord]:
        kind = self.config.activation
        weights = self.weights if adapters is None else adapters.effective_weights(self)
        a = self._inputs(x, t, cond)
        inputs, pre = [a], []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(weights, self.biases)):
            z = a @ w.T + b
            if i == last:
                out = z
            else:
                pre.append(z)
                a = _act(kind, z)
                inputs.append(a)
        return out, ForwardRecord(self.config, inputs, pre, list(weights), adapters)

    def forward(self, x, t, cond=None, adapters=None) -> np.ndarray:
        out, _ = self.forward_record(x, t, cond, adapters)
        if np.ndim(x) == 1:
            return out[0]
        return out

    __call__ = forward


def backward(
    net: VelocityNet,
    record: ForwardRecord | None,
    grad_out: np.ndarray,
    grad_hidden: Sequence[np.ndarray | None] | None = None,
) -> Gradients:
    """Backpropagate ``grad_out`` (dL/d output) through a recorded forward pass.

    ``grad_hidden`` optionally injects extra gradients on the post-activation
    hidden states. When the record was produced with adapters, the base
    parameter buffer stays zero and adapter gradients are returned instead.
    """
    if record is None:
        raise StateError("backward called without a recorded forward pass")
    if record.config != net.config:
        raise StateError("record was produced by a differently configured network")
    kind = net.config.activation
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    adapters = record.adapters
    pgrads = net.zero_grads()
    agrads = adapters.zero_grads() if adapters is not None else None
    for i in range(net.n_layers - 1, -1, -1):
        a = record.inputs[i]
        dw = g.T @ a
        if adapters is None:
            pgrads.arrays[2 * i] += dw
            pgrads.arrays[2 * i + 1] += g.sum(axis=0)
        else:
            adapters.accumulate_layer_grad(i, dw, agrads)
        ga = g @ record.weights[i]
        if i > 0:
            if grad_hidden is not None and grad_hidden[i - 1] is not None:
                ga = ga + grad_hidden[i - 1]
            g = ga * _act_grad(kind, record.pre[i - 1])
        else:
            g = ga
    cfg = net.config
    gx = g[:, : cfg.dim]
    gc = g[:, cfg.dim + 2 * cfg.n_freq :] if cfg.cond_dim else None
    return Gradients(pgrads, gx, gc, agrads)


def grad_check(
    params: ParameterSet,
    loss_fn: Callable[[], tuple[float, np.ndarray]],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` evaluates the loss at the current parameters of ``params`` and
    returns ``(value, flat_gradient)``.
    """
    theta = params.flat()
    value, analytic = loss_fn()
    if not np.isfinite(value):
        raise NumericError("loss is not finite")
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.size != theta.size:
        raise ConfigError(f"gradient has {analytic.size} entries, parameters {theta.size}")
    numeric = np.empty_like(theta)
    try:
        for i in range(theta.size):
            orig = theta[i]
            theta[i] = orig + h
            params.set_flat(theta)
            fp = loss_fn()[0]
            theta[i] = orig - h
            params.set_flat(theta)
            fm = loss_fn()[0]
            theta[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("loss is not finite under perturbation", index=i)
            numeric[i] = (fp - fm) / (2.0 * h)
    finally:
        params.set_flat(theta)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0


def config_json(config: NetConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
