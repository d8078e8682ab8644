"""Dense MLP engine with exact reverse-mode gradients.

Tensors are plain float64 ``numpy`` arrays.  ``as_tensor`` is the validating
constructor (finite values only).  Networks operate on batches: inputs have
shape ``(batch, in_dim)`` and a 1-D input is treated as a batch of one.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from fcsim.rng import stream

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    """Raised when array dimensions do not chain."""


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Convert ``data`` to a float64 array, rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != math.prod(shape):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer output {a.out_dim} does not feed input {b.in_dim}")

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``[W0, b0, W1, b1, ...]`` (views)."""
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        return Mlp([replace(l, weight=l.weight.copy(), bias=l.bias.copy()) for l in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def with_flat(self, vec: np.ndarray) -> "Mlp":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} values, got {vec.size}")
        net = self.copy()
        i = 0
        for p in net.params():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size
        return net

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray | float:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return 1.0


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"input of shape {x.shape} does not match network input {net.in_dim}")
    return x, squeeze


def forward_cached(net: Mlp, x) -> tuple[np.ndarray, list]:
    """Forward pass that also returns the per-layer cache used by ``mlp_backward``."""
    x, _ = _as_batch(net, x)
    cache = []
    h = x
    for layer in net.layers:
        z = h @ layer.weight.T + layer.bias
        a = _activate(z, layer.activation)
        cache.append((h, z, a))
        h = a
    return h, cache


def mlp_forward(net: Mlp, x) -> np.ndarray:
    x, squeeze = _as_batch(net, x)
    out, _ = forward_cached(net, x)
    return out[0] if squeeze else out


def mlp_backward(net: Mlp, x, upstream, cache: list | None = None):
    """Gradients of ``<upstream, mlp_forward(net, x)>``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` follows the
    order of ``net.params()``.  Batch contributions are summed.
    """
    x, squeeze = _as_batch(net, x)
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (x.shape[0], net.out_dim):
        raise ShapeError(f"upstream {g.shape} does not match output ({x.shape[0]}, {net.out_dim})")
    if cache is None:
        _, cache = forward_cached(net, x)
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        h, z, a = cache[i]
        gz = g * _activation_grad(z, a, layer.activation)
        grads[2 * i] = gz.T @ h
        grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ layer.weight
    return grads, (g[0] if squeeze else g)


def seeded_init(
    widths: Sequence[int],
    seed: int,
    hidden: str = "tanh",
    output: str = "identity",
    stream_key: str | int = "init",
) -> Mlp:
    """Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Draws come from ``fcsim.rng.stream(seed, stream_key)`` (PCG64 seeded by a
    ``SeedSequence``), so equal arguments give bit-identical parameters.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"need at least two positive widths, got {widths}")
    rng = stream(seed, stream_key)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        act = output if i == len(widths) - 2 else hidden
        layers.append(Layer(w, b, act))
    return Mlp(layers)


def param_count(widths: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


# -- probability helpers -------------------------------------------------------

def log_softmax(logits: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"temperature must be positive, got {gamma}")
    z = np.asarray(logits, dtype=np.float64) / gamma
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_temp(logits, gamma: float = 1.0) -> np.ndarray:
    """``exp(logits / gamma)`` normalised over the last axis."""
    return np.exp(log_softmax(logits, gamma))


def _check_prob(p: np.ndarray, name: str):
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not a probability vector")


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; terms with p = 0 contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch {p.shape} vs {q.shape}")
    _check_prob(p, "p")
    _check_prob(q, "q")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("p has mass where q is zero")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def distortion(v, vhat, kind: str = "squared_error") -> float:
    """Squared error ``||v - vhat||^2`` or negative log-likelihood ``-ln vhat[v]``."""
    if kind == "squared_error":
        d = np.asarray(v, dtype=np.float64) - np.asarray(vhat, dtype=np.float64)
        return float(np.sum(d * d))
    if kind == "neg_log_likelihood":
        vhat = np.asarray(vhat, dtype=np.float64)
        idx = int(v)
        if not 0 <= idx < vhat.shape[-1]:
            raise IndexError(f"class {idx} out of range for {vhat.shape[-1]} classes")
        return float(-np.log(vhat[idx]))
    raise ValueError(f"unknown distortion {kind!r}")


# -- optimisation --------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``; inputs untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and state have different lengths")
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, m=new_m, v=new_v, step=t)


class Adam:
    """In-place wrapper around ``adam_step`` for a fixed list of parameter arrays."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3):
        self.params = list(params)
        self.state = AdamState.zeros_like(self.params, lr=lr)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state = replace(self.state, lr=value)

    def step(self, grads: Sequence[np.ndarray]):
        new, self.state = adam_step(self.params, grads, self.state)
        for p, q in zip(self.params, new):
            p[...] = q


class PlateauHalver:
    """Halve the learning rate once the monitored loss stops improving.

    A value counts as an improvement when it beats the best seen so far by
    more than ``min_delta``; after ``patience`` non-improving evaluations the
    rate is multiplied by ``factor`` and the counter resets.
    """

    def __init__(self, patience: int = 5, min_delta: float = 1e-4, factor: float = 0.5):
        self.patience = patience
        self.min_delta = min_delta
        self.factor = factor
        self.best = math.inf
        self.bad = 0

    def update(self, value: float, lr: float) -> float:
        if value < self.best - self.min_delta:
            self.best = value
            self.bad = 0
            return lr
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            return lr * self.factor
        return lr


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def numeric_grad(f: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64, ndmin=1)
    out = np.empty_like(theta)
    flat, gflat = theta.ravel(), out.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f(theta)
        flat[i] = old - step
        down = f(theta)
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return out


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params,
    tol: float = 1e-5,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(theta)`` returns ``(value, grad)``.  The error is the largest
    componentwise discrepancy divided by the largest gradient magnitude, so
    components that are zero up to rounding do not dominate the score.
    """
    theta = np.array(params, dtype=np.float64, ndmin=1)
    _, analytic = loss_fn(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(theta.shape)
    numeric = numeric_grad(lambda t: loss_fn(t)[0], theta, step)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    err = np.max(np.abs(analytic - numeric), initial=0.0)
    rel = 0.0 if err == 0.0 else err / max(scale, 1e-300)
    return GradCheckReport(float(rel), analytic, numeric, tol)
