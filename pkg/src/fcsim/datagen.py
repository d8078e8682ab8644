"""Synthetic multi-view datasets with known ground truth."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from fcsim.rng import stream

SPLITS = ("train", "val", "test")


@dataclass
class DistributedDataset:
    views: list[np.ndarray]  # node n -> (B, d_n)
    targets: np.ndarray  # (B,) int classes or (B, m) floats
    split: np.ndarray  # (B,) of "train" / "val" / "test"
    task: str
    params: dict = field(default_factory=dict)
    latents: np.ndarray | None = None
    windows: list[np.ndarray] | None = None

    def __post_init__(self):
        b = self.targets.shape[0]
        if any(x.shape[0] != b for x in self.views) or self.split.shape != (b,):
            raise ValueError("all nodes must hold the same number of examples")

    @property
    def n_nodes(self) -> int:
        return len(self.views)

    @property
    def size(self) -> int:
        return self.targets.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.params["V_size"]) if self.task == "classification" else 0

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.task == "classification" else self.targets.reshape(self.size, -1).shape[1]

    def indices(self, tag: str) -> np.ndarray:
        if tag not in SPLITS:
            raise ValueError(f"unknown split {tag!r}")
        return np.flatnonzero(self.split == tag)

    def part(self, tag: str) -> tuple[list[np.ndarray], np.ndarray]:
        idx = self.indices(tag)
        return [x[idx] for x in self.views], self.targets[idx]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for x in self.views:
            h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.targets).astype("<f8").tobytes())
        h.update("".join(self.split.tolist()).encode())
        return h.hexdigest()


def view_windows(n_nodes: int, latent_dim: int, view_dim: int, overlap_frac: float) -> list[np.ndarray]:
    """Circular index windows of length ``view_dim`` into the latent vector.

    Consecutive windows share ``overlap_frac * view_dim`` coordinates unless
    that would leave latent coordinates unobserved, in which case the stride
    widens to ``latent_dim / N``.
    """
    if not 0 <= overlap_frac < 1:
        raise ValueError("overlap_frac must lie in [0, 1)")
    if n_nodes * view_dim < latent_dim or view_dim > latent_dim:
        raise ValueError(f"{n_nodes} windows of width {view_dim} cannot cover {latent_dim} coordinates")
    stride = max(view_dim * (1.0 - overlap_frac), latent_dim / n_nodes)
    out = []
    for n in range(n_nodes):
        start = int(round(n * stride)) % latent_dim
        out.append((start + np.arange(view_dim)) % latent_dim)
    covered = np.unique(np.concatenate(out))
    if covered.size != latent_dim:
        raise ValueError("view windows leave latent coordinates unobserved")
    return out


def class_means(v_size: int, latent_dim: int, separation: float, seed: int) -> np.ndarray:
    """Rows at pairwise distance ``separation`` (scaled orthonormal directions)."""
    if v_size > latent_dim:
        raise ValueError("need latent_dim >= V_size for equidistant class means")
    g = stream(seed, "data", "means").standard_normal((latent_dim, v_size))
    q, _ = np.linalg.qr(g)
    return (separation / math.sqrt(2.0)) * q.T


def assign_splits(b: int, fractions: Sequence[float], seed: int) -> np.ndarray:
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n_train = int(round(b * fractions[0]))
    n_val = int(round(b * fractions[1]))
    if n_train == 0 or n_train + n_val > b:
        raise ValueError(f"fractions {fractions} give a degenerate split of {b} examples")
    perm = stream(seed, "data", "split").permutation(b)
    tags = np.empty(b, dtype="<U5")
    tags[perm[:n_train]] = "train"
    tags[perm[n_train:n_train + n_val]] = "val"
    tags[perm[n_train + n_val:]] = "test"
    return tags


def split(dataset: DistributedDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DistributedDataset:
    tags = assign_splits(dataset.size, fractions, seed)
    return replace(dataset, split=tags, params={**dataset.params, "fractions": list(fractions), "split_seed": seed})


def gen_mixture_classification(
    N: int = 4,
    V_size: int = 4,
    latent_dim: int = 16,
    view_dim: int = 8,
    overlap_frac: float = 0.25,
    B: int = 4096,
    separation: float = 6.0,
    noise_std: float = 0.25,
    seed: int = 0,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
) -> DistributedDataset:
    windows = view_windows(N, latent_dim, view_dim, overlap_frac)
    means = class_means(V_size, latent_dim, separation, seed)
    rng = stream(seed, "data", "samples")
    v = rng.integers(0, V_size, size=B)
    u = means[v] + rng.standard_normal((B, latent_dim))
    views = [u[:, w] + noise_std * rng.standard_normal((B, view_dim)) for w in windows]
    params = dict(
        generator="mixture", N=N, V_size=V_size, latent_dim=latent_dim, view_dim=view_dim,
        overlap_frac=overlap_frac, B=B, separation=separation, noise_std=noise_std, seed=seed,
    )
    ds = DistributedDataset(views, v, np.full(B, "train", dtype="<U5"), "classification", params, u, windows)
    return split(ds, fractions, seed)


def nomographic_value(xs, fn: str) -> np.ndarray:
    """F(x) for the two nomographic targets; ``xs`` has one column per node."""
    xs = np.asarray(xs, dtype=np.float64)
    if np.any(xs <= 0):
        raise ValueError("nomographic targets need positive inputs")
    if fn == "product":
        return np.prod(xs, axis=-1)
    if fn == "geometric_mean":
        return np.exp(np.mean(np.log(xs), axis=-1))
    raise ValueError(f"unknown function {fn!r}")


def gen_nomographic_regression(
    N: int = 2,
    B: int = 4096,
    seed: int = 0,
    fn: str = "product",
    low: float = 0.5,
    high: float = 1.5,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
) -> DistributedDataset:
    rng = stream(seed, "data", "nomographic")
    x = rng.uniform(low, high, size=(B, N))
    v = nomographic_value(x, fn)[:, None]
    params = dict(generator="nomographic", N=N, B=B, seed=seed, fn=fn, low=low, high=high)
    ds = DistributedDataset([x[:, [n]] for n in range(N)], v, np.full(B, "train", dtype="<U5"), "regression", params)
    return split(ds, fractions, seed)


def nearest_mean_accuracy(dataset: DistributedDataset, tag: str = "test") -> float:
    """Centralised oracle: nearest class mean on the concatenated views, means from train."""
    if dataset.task != "classification":
        raise ValueError("oracle accuracy needs a classification dataset")
    xs_tr, v_tr = dataset.part("train")
    xs_te, v_te = dataset.part(tag)
    x_tr, x_te = np.concatenate(xs_tr, axis=1), np.concatenate(xs_te, axis=1)
    mu = np.stack([x_tr[v_tr == c].mean(axis=0) for c in range(dataset.n_classes)])
    d = ((x_te[:, None, :] - mu[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == v_te))


def reconstruct_latent(dataset: DistributedDataset) -> np.ndarray:
    """Least-squares latent from all views: average of every observation of each coordinate."""
    if dataset.windows is None:
        raise ValueError("dataset carries no window description")
    d = dataset.params["latent_dim"]
    acc = np.zeros((dataset.size, d))
    cnt = np.zeros(d)
    for x, w in zip(dataset.views, dataset.windows):
        np.add.at(acc.T, w, x.T)
        np.add.at(cnt, w, 1.0)
    return acc / cnt
