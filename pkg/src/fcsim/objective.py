"""Training losses, the Gaussian variational prior and the bound constants.

All quantities are in nats.  Every loss is a batch mean and comes with exact
gradients with respect to every trainable array of the system.  Channel noise
is passed in explicitly so a draw can be frozen for gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from fcsim import channel as ch
from fcsim import system as sy
from fcsim.nn import ShapeError, forward_cached, log_softmax, mlp_backward

METHODS = ("autoencoder", "lagrange", "ib")


@dataclass(frozen=True)
class LossConfig:
    method: str = "ib"
    lam: float = 1e-3
    beta: float = 0.1
    gamma: float = 2.0
    distortion: str = "neg_log_likelihood"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lambda and beta must be non-negative")
        if self.gamma <= 0:
            raise ValueError("temperature must be positive")
        if self.distortion not in ("neg_log_likelihood", "squared_error"):
            raise ValueError(f"unknown distortion {self.distortion!r}")


@dataclass(frozen=True)
class GaussianPrior:
    """Zero-mean isotropic Gaussian r(y) = N(0, var I_dim)."""

    dim: int
    var: float = 1.0

    def __post_init__(self):
        if self.var <= 0:
            raise ValueError("prior variance must be positive")


def fit_prior(samples) -> GaussianPrior:
    """Moment-matched prior: pooled second moment over rows and dimensions."""
    s = np.asarray(samples, dtype=np.float64)
    s = s.reshape(-1, s.shape[-1])
    return GaussianPrior(s.shape[-1], max(float(np.mean(s * s)), 1e-12))


def log_prior_gaussian(yhat, prior: GaussianPrior):
    """ln r(yhat); a batch of rows gives one value per row."""
    yhat = np.asarray(yhat, dtype=np.float64)
    if yhat.shape[-1] != prior.dim:
        raise ShapeError(f"prior has dimension {prior.dim}, got {yhat.shape[-1]}")
    sq = np.sum(yhat * yhat, axis=-1)
    out = -0.5 * prior.dim * math.log(2.0 * math.pi * prior.var) - sq / (2.0 * prior.var)
    return float(out) if np.ndim(out) == 0 else out


# -- distortion ---------------------------------------------------------------------

def distortion_terms(output: np.ndarray, v, kind: str):
    """Per-example distortion and the gradient of their mean w.r.t. ``output``.

    For ``neg_log_likelihood`` the output is a row of logits and the
    probabilities are their softmax.
    """
    b = output.shape[0]
    if kind == "neg_log_likelihood":
        v = np.asarray(v, dtype=np.int64)
        if np.any(v < 0) or np.any(v >= output.shape[1]):
            raise IndexError("class index out of range")
        logp = log_softmax(output)
        d = -logp[np.arange(b), v]
        g = np.exp(logp)
        g[np.arange(b), v] -= 1.0
        return d, g / b
    v = np.asarray(v, dtype=np.float64).reshape(output.shape)
    r = output - v
    return np.sum(r * r, axis=1), 2.0 * r / b


def sample_noise(spec: ch.ChannelSpec, batch: int, rng: np.random.Generator) -> np.ndarray:
    return ch.gaussian_noise((batch, spec.k_total), spec.sigma_z2, rng)


# -- whole-system losses ---------------------------------------------------------------

@dataclass
class LossResult:
    value: float
    distortion: float
    penalty: float
    grads: list[np.ndarray] | None = None
    output: np.ndarray | None = None
    yhat: np.ndarray | None = None
    ys: list[np.ndarray] = field(default_factory=list)


def system_loss(
    system: sy.System,
    xs: Sequence[np.ndarray],
    v,
    noise: np.ndarray,
    cfg: LossConfig,
    prior: GaussianPrior | None = None,
    lambdas: Sequence[float] | None = None,
    need_grad: bool = True,
) -> LossResult:
    """Batch-mean loss of the configured method and its gradients.

    Gradients follow the order of ``system.params()``.
    """
    b = xs[0].shape[0]
    if cfg.method == "autoencoder" and not system.normalize:
        raise ValueError("the autoencoder loss needs power-normalised encoders")
    if cfg.method != "autoencoder" and system.normalize:
        raise ValueError("soft-constraint losses use unnormalised encoders")
    ys, caches = sy.encode_all(system, xs)
    yhat = sy.transmit_clean(system, ys) + noise
    out, dcache = sy.decode(system, yhat)
    d, g_out = distortion_terms(out, v, cfg.distortion)
    value = float(np.mean(d))
    penalty = 0.0
    lam = [cfg.lam] * system.n_nodes if lambdas is None else list(lambdas)
    if any(l < 0 for l in lam):
        raise ValueError("Lagrange multipliers must be non-negative")
    g_ib = None
    if cfg.method == "lagrange":
        penalty = sum(l * float(np.mean(np.sum(y * y, axis=1))) for l, y in zip(lam, ys))
    elif cfg.method == "ib" and cfg.lam > 0:
        if prior is None:
            raise ValueError("the IB loss needs a prior")
        penalty = -cfg.lam * float(np.mean(log_prior_gaussian(yhat, prior)))
        g_ib = cfg.lam * yhat / (prior.var * b)
    res = LossResult(value + penalty, value, penalty, None, out, yhat, ys)
    if not need_grad:
        return res
    dec_grads, g_yhat = sy.decode_backward(system, dcache, g_out)
    if g_ib is not None:
        g_yhat = g_yhat + g_ib
    grads = []
    spec = system.channel
    for n, (enc, cache, y) in enumerate(zip(system.encoders, caches, ys)):
        gy = g_yhat if spec.kind == "gmac" else g_yhat[:, spec.offsets()[n]]
        if cfg.method == "lagrange":
            gy = gy + 2.0 * lam[n] * y / b
        grads += sy.encode_backward(enc, cache, gy, spec.k_per_node[n], spec.p_t, system.normalize)
    res.grads = grads + dec_grads
    return res


def loss_autoencoder(system, xs, v, noise, distortion_kind="neg_log_likelihood") -> float:
    return system_loss(system, xs, v, noise, LossConfig("autoencoder", 0.0, distortion=distortion_kind), need_grad=False).value


def loss_lagrange(system, xs, v, noise, lambdas, distortion_kind="neg_log_likelihood") -> float:
    cfg = LossConfig("lagrange", 0.0, distortion=distortion_kind)
    return system_loss(system, xs, v, noise, cfg, lambdas=lambdas, need_grad=False).value


def loss_ib(system, xs, v, noise, prior, lam, distortion_kind="neg_log_likelihood") -> float:
    cfg = LossConfig("ib", lam, distortion=distortion_kind)
    return system_loss(system, xs, v, noise, cfg, prior=prior, need_grad=False).value


# -- node-local losses ---------------------------------------------------------------

@dataclass
class LocalLossResult:
    value: float
    parts: dict
    enc_grads: list[np.ndarray] | None = None
    helper_grads: list[np.ndarray] | None = None
    logits: np.ndarray | None = None


def tempered(probs: np.ndarray, gamma: float) -> np.ndarray:
    """Re-temper a distribution given at unit temperature: q^(1/gamma), normalised."""
    logq = np.log(np.maximum(probs, 1e-300)) / gamma
    logq -= logq.max(axis=-1, keepdims=True)
    q = np.exp(logq)
    return q / q.sum(axis=-1, keepdims=True)


def local_loss(
    enc: sy.Encoder,
    helper,
    x: np.ndarray,
    v,
    offset: np.ndarray,
    cfg: LossConfig,
    k_n: int,
    p_t: float,
    normalize: bool,
    prior: GaussianPrior | None = None,
    teacher: np.ndarray | None = None,
    other: np.ndarray | None = None,
    need_grad: bool = True,
) -> LocalLossResult:
    """Loss a sensor can evaluate without the router.

    The helper sees ``y_n + offset``: a simulated noise draw in stage 1, the
    frozen remainder of the received sum on a GMAC, or a simulated draw of the
    node's own slot on the orthogonal channel.  Optional terms:

    * ``teacher``: router distributions at unit temperature; adds
      ``beta * KL(q_h(.; gamma) || q_d(.; gamma))``.
    * ``other``: per-example product of the other experts' factors; adds
      ``-ln Z_n`` with ``Z_n = sum_w q_h(w) other(w)``.
    """
    b = x.shape[0]
    y, ecache = sy.encode(enc, x, k_n, p_t, normalize)
    z = y + offset
    logits, hcache = forward_cached(helper, z)
    d, g_logits = distortion_terms(logits, v, cfg.distortion)
    parts = {"distortion": float(np.mean(d))}
    g_z = np.zeros_like(z)
    g_y = np.zeros_like(y)
    if cfg.method == "ib" and cfg.lam > 0:
        if prior is None:
            raise ValueError("the IB term needs a prior")
        parts["prior"] = -cfg.lam * float(np.mean(log_prior_gaussian(z, prior)))
        g_z += cfg.lam * z / (prior.var * b)
    elif cfg.method == "lagrange":
        parts["power"] = cfg.lam * float(np.mean(np.sum(y * y, axis=1)))
        g_y += 2.0 * cfg.lam * y / b
    if teacher is not None and cfg.beta > 0:
        t = tempered(np.asarray(teacher, dtype=np.float64), cfg.gamma)
        logp = log_softmax(logits, cfg.gamma)
        p = np.exp(logp)
        diff = logp - np.log(np.maximum(t, 1e-300))
        kl = np.sum(p * diff, axis=1)
        parts["distill"] = cfg.beta * float(np.mean(kl))
        g_logits = g_logits + cfg.beta * (p * (diff - kl[:, None])) / (cfg.gamma * b)
    if other is not None:
        other = np.asarray(other, dtype=np.float64)
        p = np.exp(log_softmax(logits))
        zn = np.sum(p * other, axis=1)
        parts["log_z"] = -float(np.mean(np.log(zn)))
        g_logits = g_logits + (p - p * other / zn[:, None]) / b
    value = sum(parts.values())
    res = LocalLossResult(value, parts, logits=logits)
    if not need_grad:
        return res
    helper_grads, g_in = mlp_backward(helper, z, g_logits, hcache)
    res.enc_grads = sy.encode_backward(enc, ecache, g_y + g_in + g_z, k_n, p_t, normalize)
    res.helper_grads = helper_grads
    return res


# -- Theorem-1 constants and report -------------------------------------------------------

def _check_nodes(k_list, p_list):
    k_list, p_list = list(k_list), list(p_list)
    if len(k_list) != len(p_list):
        raise ValueError("need one power budget per node")
    if any(k < 1 for k in k_list) or any(p <= 0 for p in p_list):
        raise ValueError("K_n must be >= 1 and P_T > 0")
    return k_list, p_list


def const_A1(k_list, p_list) -> float:
    """Sum of log surface areas of the K_n-spheres of radius sqrt(K_n P_T)."""
    total = 0.0
    for k, p in zip(*_check_nodes(k_list, p_list)):
        r = math.sqrt(k * p)
        total += math.log(2.0) + 0.5 * k * math.log(math.pi) + (k - 1) * math.log(r) - gammaln(0.5 * k)
    return total


def const_A2(k_list, p_list) -> float:
    return sum(0.5 * k * math.log(2.0 * math.pi) + 0.5 * math.log(k * p) for k, p in zip(*_check_nodes(k_list, p_list)))


@dataclass(frozen=True)
class BoundReport:
    ib_bound: float
    au_bound: float
    sl_bound: float
    mean_distortion: float
    noise_entropy: float
    prior_var: float

    @property
    def ib_tightest(self) -> bool:
        return self.ib_bound <= min(self.au_bound, self.sl_bound)


def theorem1_report(system: sy.System, xs, v, lam: float, rng: np.random.Generator) -> BoundReport:
    """Evaluate the three variational bounds on one draw of channel noise.

    The prior is fitted to the received vectors of the same pass.
    """
    spec = system.channel
    if spec.sigma_z2 <= 0:
        raise ValueError("the noise entropy is undefined for a noiseless channel")
    ys, _ = sy.encode_all(system, xs)
    yhat = sy.transmit_clean(system, ys) + sample_noise(spec, xs[0].shape[0], rng)
    out, _ = sy.decode(system, yhat)
    kind = "neg_log_likelihood" if system.task == "classification" else "squared_error"
    dist = float(np.mean(distortion_terms(out, v, kind)[0]))
    prior = fit_prior(yhat)
    h_z = ch.gaussian_entropy(spec.k_total, spec.sigma_z2)
    ib = dist - lam * float(np.mean(log_prior_gaussian(yhat, prior))) - lam * h_z
    au = dist + lam * const_A1(spec.k_per_node, [spec.p_t] * spec.n_nodes)
    power = sum(
        lam / (k * spec.p_t) * float(np.mean(np.sum(y * y, axis=1))) for k, y in zip(spec.k_per_node, ys)
    )
    sl = dist + power + lam * const_A2(spec.k_per_node, [spec.p_t] * spec.n_nodes)
    return BoundReport(ib, au, sl, dist, h_z, prior.var)
