"""Channel models, power normalisation and capacity/noise conversions.

Capacities are in bits (log base 2); everything else in the package uses nats.
Per-node signals are batched as ``(batch, K_n)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fcsim.nn import ShapeError
from fcsim.rng import stream

KINDS = ("orth_awgn", "gmac")


class DegenerateInputError(ValueError):
    """Raised for inputs a channel operation cannot handle, such as zero-norm codewords."""


@dataclass(frozen=True)
class ChannelSpec:
    kind: str
    k_per_node: tuple[int, ...]
    p_t: float = 1.0
    sigma_z2: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        object.__setattr__(self, "k_per_node", tuple(int(k) for k in self.k_per_node))
        if not self.k_per_node or min(self.k_per_node) < 1:
            raise ValueError("every node needs at least one channel use")
        if self.kind == "gmac" and len(set(self.k_per_node)) != 1:
            raise ValueError("GMAC requires equal K_n for all nodes")
        if self.p_t <= 0:
            raise ValueError("power budget must be positive")
        if self.sigma_z2 < 0:
            raise ValueError("noise variance must be non-negative")

    @classmethod
    def make(cls, kind: str, n_nodes: int, k_n: int, p_t: float = 1.0, sigma_z2: float = 0.0):
        return cls(kind, (k_n,) * n_nodes, p_t, sigma_z2)

    @property
    def n_nodes(self) -> int:
        return len(self.k_per_node)

    @property
    def k_total(self) -> int:
        """Dimension K of the received vector."""
        if self.kind == "gmac":
            return self.k_per_node[0]
        return sum(self.k_per_node)

    @property
    def uplink_per_example(self) -> int:
        """Channel uses spent to send one example; GMAC nodes share the same K slots."""
        return self.k_total

    def uplink_shares(self) -> list[tuple[str, int]]:
        """Ledger entries ``(node, uses)`` for one example."""
        if self.kind == "gmac":
            return [("all", self.k_total)]
        return [(str(n), k) for n, k in enumerate(self.k_per_node)]

    def offsets(self) -> list[slice]:
        """Slices of the received vector belonging to each node (orthogonal AWGN)."""
        out, i = [], 0
        for k in self.k_per_node:
            out.append(slice(i, i + k))
            i += k
        return out

    def with_noise(self, sigma_z2: float) -> "ChannelSpec":
        return ChannelSpec(self.kind, self.k_per_node, self.p_t, sigma_z2)


# -- power -----------------------------------------------------------------------

def normalize_power(y, k_n: int, p_t: float) -> np.ndarray:
    """Scale each row of ``y`` to squared norm ``k_n * p_t``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != k_n:
        raise ShapeError(f"expected {k_n} entries, got {y.shape[-1]}")
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalise a zero-norm codeword")
    return y * (math.sqrt(k_n * p_t) / norm)


def normalize_power_backward(y: np.ndarray, upstream: np.ndarray, k_n: int, p_t: float) -> np.ndarray:
    """Vector-Jacobian product of ``normalize_power`` at ``y``."""
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    unit = y / norm
    radial = np.sum(unit * upstream, axis=-1, keepdims=True)
    return (math.sqrt(k_n * p_t) / norm) * (upstream - unit * radial)


# -- transmission -----------------------------------------------------------------

def _check_nodes(ys: Sequence[np.ndarray], spec: ChannelSpec) -> list[np.ndarray]:
    if len(ys) != spec.n_nodes:
        raise ShapeError(f"expected {spec.n_nodes} node signals, got {len(ys)}")
    out = []
    for n, (y, k) in enumerate(zip(ys, spec.k_per_node)):
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != k:
            raise ShapeError(f"node {n} sent {y.shape[-1]} values, expected {k}")
        out.append(y)
    return out


def gaussian_noise(shape, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    if sigma2 < 0:
        raise ValueError("noise variance must be non-negative")
    if sigma2 == 0:
        return np.zeros(shape)
    return math.sqrt(sigma2) * rng.standard_normal(shape)


def channel_sum(ys: Sequence[np.ndarray], spec: ChannelSpec) -> np.ndarray:
    """Noise-free channel map: concatenation (AWGN) or superposition (GMAC)."""
    ys = _check_nodes(ys, spec)
    if spec.kind == "orth_awgn":
        return np.concatenate(ys, axis=-1)
    if len({y.shape for y in ys}) != 1:
        raise ShapeError("GMAC node signals must share a shape")
    return np.sum(ys, axis=0)


def awgn_transmit(ys: Sequence[np.ndarray], spec: ChannelSpec, rng: np.random.Generator) -> np.ndarray:
    """Concatenate the node signals and add i.i.d. N(0, sigma_z2) noise."""
    if spec.kind != "orth_awgn":
        raise ValueError("awgn_transmit needs an orth_awgn channel")
    clean = channel_sum(ys, spec)
    return clean + gaussian_noise(clean.shape, spec.sigma_z2, rng)


def gmac_transmit(ys: Sequence[np.ndarray], spec: ChannelSpec, rng: np.random.Generator) -> np.ndarray:
    """Superpose the node signals and add i.i.d. N(0, sigma_z2) noise."""
    if spec.kind != "gmac":
        raise ValueError("gmac_transmit needs a gmac channel")
    clean = channel_sum(ys, spec)
    return clean + gaussian_noise(clean.shape, spec.sigma_z2, rng)


def transmit(ys: Sequence[np.ndarray], spec: ChannelSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "gmac":
        return gmac_transmit(ys, spec, rng)
    return awgn_transmit(ys, spec, rng)


def local_sim_channel(y_n, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Node-local surrogate channel used during stage-1 training."""
    y_n = np.asarray(y_n, dtype=np.float64)
    return y_n + gaussian_noise(y_n.shape, sigma2, rng)


# -- capacity ----------------------------------------------------------------------

def _positive(**kw):
    for name, value in kw.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")


def capacity_gmac_ub(sigma_z2: float, k: int, n_nodes: int, p_t: float) -> float:
    """Upper bound (K/2) log2(1 + (N^2 - N + 1) P_T / sigma_z2), in bits."""
    _positive(sigma_z2=sigma_z2, k=k, n_nodes=n_nodes)
    if p_t < 0:
        raise ValueError("power must be non-negative")
    return 0.5 * k * math.log2(1.0 + (n_nodes * n_nodes - n_nodes + 1) * p_t / sigma_z2)


def noise_from_capacity_gmac_ub(c_bits: float, k: int, n_nodes: int, p_t: float) -> float:
    _positive(c_bits=c_bits, k=k, n_nodes=n_nodes, p_t=p_t)
    return (n_nodes * n_nodes - n_nodes + 1) * p_t / math.expm1(2.0 * c_bits * math.log(2.0) / k)


def capacity_awgn(sigma_z2: float, k_list: Sequence[int], p_t: float) -> float:
    """Total capacity sum_n (K_n/2) log2(1 + P_T / sigma_z2) of the orthogonal channel."""
    _positive(sigma_z2=sigma_z2)
    if p_t < 0:
        raise ValueError("power must be non-negative")
    return sum(0.5 * k * math.log2(1.0 + p_t / sigma_z2) for k in k_list)


def noise_from_capacity_awgn(c_bits_total: float, k_list: Sequence[int], n_nodes: int, p_t: float) -> float:
    """Common noise variance giving total capacity ``c_bits_total``.

    With equal K_n every node carries C/N bits over its K_n uses, so
    sigma_z2 = P_T / (2^(2C/(N K_n)) - 1).  Unequal K_n use the same
    common-noise inversion with K = sum K_n.
    """
    k_list = [int(k) for k in k_list]
    _positive(c_bits_total=c_bits_total, n_nodes=n_nodes, p_t=p_t)
    if len(k_list) != n_nodes or min(k_list) < 1:
        raise ValueError("k_list must hold one positive K_n per node")
    k_total = sum(k_list)
    return p_t / math.expm1(2.0 * c_bits_total * math.log(2.0) / k_total)


def sigma2_for(kind: str, c_bits: float, k_n: int, n_nodes: int, p_t: float) -> float:
    """Noise variance that realises capacity ``c_bits`` on a channel of the given kind."""
    if kind == "gmac":
        return noise_from_capacity_gmac_ub(c_bits, k_n, n_nodes, p_t)
    return noise_from_capacity_awgn(c_bits, [k_n] * n_nodes, n_nodes, p_t)


def gaussian_entropy(k: int, sigma2: float) -> float:
    """Differential entropy (nats) of N(0, sigma2 I_k)."""
    if sigma2 <= 0:
        raise ValueError("entropy of a degenerate Gaussian is undefined")
    return 0.5 * k * math.log(2.0 * math.pi * math.e * sigma2)


# -- orthogonal embedding for GMAC stage 1 ---------------------------------------

@dataclass(frozen=True)
class OrthoEmbedding:
    """Fixed matrices T_n (K x r) with T_m^T T_n = delta(m - n) I_r."""

    mats: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.mats:
            raise ValueError("need at least one embedding matrix")
        k, r = self.mats[0].shape
        if len(self.mats) * r > k:
            raise ValueError(f"{len(self.mats)} subspaces of dimension {r} do not fit in R^{k}")
        stacked = np.concatenate(self.mats, axis=1)
        gram = stacked.T @ stacked
        if np.max(np.abs(gram - np.eye(gram.shape[0]))) > 1e-12:
            raise ValueError("embedding matrices are not orthonormal")

    @property
    def k(self) -> int:
        return self.mats[0].shape[0]

    @property
    def r(self) -> int:
        return self.mats[0].shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.mats)


def make_embedding(k: int, n_nodes: int, seed: int, r: int | None = None) -> OrthoEmbedding:
    """QR-orthonormalise a seeded Gaussian K x (N r) matrix and split its columns.

    ``r`` defaults to ``K // N``.
    """
    r = k // n_nodes if r is None else r
    if r < 1 or n_nodes * r > k:
        raise ValueError(f"cannot pack {n_nodes} subspaces of dimension {r} into R^{k}")
    g = stream(seed, "embedding", k, n_nodes, r).standard_normal((k, n_nodes * r))
    q, _ = np.linalg.qr(g)
    return OrthoEmbedding(tuple(q[:, n * r:(n + 1) * r].copy() for n in range(n_nodes)))


def embed_orthogonal(i_n, emb: OrthoEmbedding, n: int) -> np.ndarray:
    i_n = np.asarray(i_n, dtype=np.float64)
    if i_n.shape[-1] != emb.r:
        raise ShapeError(f"expected inner dimension {emb.r}, got {i_n.shape[-1]}")
    return i_n @ emb.mats[n].T


def recover_subspace(yhat, emb: OrthoEmbedding, n: int) -> np.ndarray:
    yhat = np.asarray(yhat, dtype=np.float64)
    if yhat.shape[-1] != emb.k:
        raise ShapeError(f"expected received dimension {emb.k}, got {yhat.shape[-1]}")
    return yhat @ emb.mats[n]
