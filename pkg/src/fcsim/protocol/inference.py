"""Product-of-experts combination, outage-aware inference and evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from fcsim import objective as ob
from fcsim import system as sy
from fcsim.nn import ShapeError, softmax_temp


@dataclass(frozen=True)
class OutageSet:
    """Ids of nodes that do not transmit."""

    inactive: frozenset = frozenset()

    @classmethod
    def of(cls, ids: Iterable[int] = ()) -> "OutageSet":
        return cls(frozenset(int(i) for i in ids))

    def active(self, n_nodes: int) -> list[int]:
        if any(i < 0 or i >= n_nodes for i in self.inactive):
            raise ValueError(f"outage ids must lie in 0..{n_nodes - 1}")
        act = [n for n in range(n_nodes) if n not in self.inactive]
        if not act:
            raise ValueError("at least one node must transmit")
        return act


def compute_Zn(helper_dist, teacher_factors: Sequence) -> float:
    """Z_n = sum_w q_h(w) prod_m q_d^(m)(w)."""
    q = np.asarray(helper_dist, dtype=np.float64)
    prod = np.ones_like(q)
    for f in teacher_factors:
        f = np.asarray(f, dtype=np.float64)
        if f.shape != q.shape:
            raise ShapeError(f"factor of shape {f.shape} does not match {q.shape}")
        prod = prod * f
    return float(np.sum(q * prod))


def poe_combine(expert_dists: Sequence) -> np.ndarray:
    """Normalised elementwise product of expert distributions."""
    if len(expert_dists) == 0:
        raise ValueError("need at least one expert")
    arrs = [np.asarray(d, dtype=np.float64) for d in expert_dists]
    if len({a.shape for a in arrs}) != 1:
        raise ShapeError("experts disagree on the number of classes")
    prod = np.prod(np.stack(arrs), axis=0)
    mass = prod.sum(axis=-1, keepdims=True)
    if np.any(mass <= 0):
        raise ValueError("experts have no common support")
    return prod / mass


def received(system: sy.System, xs, noise, outage: OutageSet = OutageSet(), scale: bool = True) -> np.ndarray:
    """What the router sees when the nodes in ``outage`` stay silent.

    On the orthogonal channel the silent nodes' slots (signal and noise) are
    zero.  On a GMAC the noisy partial sum is optionally rescaled by N/|S|.
    """
    spec = system.channel
    active = outage.active(spec.n_nodes)
    ys, _ = sy.encode_all(system, xs)
    yhat = sy.transmit_clean(system, ys, active if outage.inactive else None) + noise
    if not outage.inactive:
        return yhat
    if spec.kind == "orth_awgn":
        for n in outage.inactive:
            yhat[:, spec.offsets()[n]] = 0.0
    elif scale:
        yhat = yhat * (spec.n_nodes / len(active))
    return yhat


def infer(system: sy.System, xs, noise, outage: OutageSet = OutageSet(), scale: bool = True) -> np.ndarray:
    """Class distributions (classification) or estimates (regression)."""
    yhat = received(system, xs, noise, outage, scale)
    active = outage.active(system.n_nodes) if system.decoder.kind == "poe_shared" else None
    out, _ = sy.decode(system, yhat, active)
    return softmax_temp(out) if system.task == "classification" else out


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float  # percent; nan for regression
    mse: float  # nan for classification


def evaluate(system: sy.System, xs, v, rng: np.random.Generator, outage: OutageSet = OutageSet(), scale: bool = True) -> EvalResult:
    noise = ob.sample_noise(system.channel, xs[0].shape[0], rng)
    out = infer(system, xs, noise, outage, scale)
    if system.task == "classification":
        v = np.asarray(v, dtype=np.int64)
        p = out[np.arange(v.size), v]
        loss = float(-np.mean(np.log(np.maximum(p, 1e-300))))
        return EvalResult(loss, 100.0 * float(np.mean(np.argmax(out, axis=1) == v)), float("nan"))
    mse = float(np.mean(np.sum((out - np.asarray(v).reshape(out.shape)) ** 2, axis=1)))
    return EvalResult(mse, float("nan"), mse)
