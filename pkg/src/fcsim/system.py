"""Encoders, decoders and the differentiable sensor-to-router pipeline.

An encoder maps a node's view ``x_n`` to its channel input ``y_n``.  Its MLP
ends in a tanh layer; the bounded output is either projected onto the power
sphere (``normalize=True``) or scaled by ``sqrt(P_T)``.  GMAC encoders built
for stage 1 additionally pass through a fixed embedding ``T_n`` that places
their output in a private subspace of R^K; once lifted, that map becomes a
trainable dense layer.

Forward functions return a cache that the matching backward function
consumes.  Parameter gradients are summed over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fcsim import channel as ch
from fcsim.nn import Mlp, ShapeError, forward_cached, mlp_backward, seeded_init

TASKS = ("classification", "regression")
DECODER_KINDS = ("standard", "poe_shared")


@dataclass
class Encoder:
    net: Mlp
    embed: np.ndarray | None = None  # (K, r)
    embed_trainable: bool = False

    def params(self) -> list[np.ndarray]:
        out = self.net.params()
        if self.embed is not None and self.embed_trainable:
            out.append(self.embed)
        return out

    @property
    def out_dim(self) -> int:
        return self.net.out_dim if self.embed is None else self.embed.shape[0]

    def copy(self) -> "Encoder":
        emb = None if self.embed is None else self.embed.copy()
        return Encoder(self.net.copy(), emb, self.embed_trainable)

    def lift(self) -> "Encoder":
        """Make the subspace embedding trainable (no effect without one)."""
        emb = None if self.embed is None else self.embed.copy()
        return Encoder(self.net.copy(), emb, self.embed is not None)


@dataclass
class Decoder:
    net: Mlp
    kind: str = "standard"

    def __post_init__(self):
        if self.kind not in DECODER_KINDS:
            raise ValueError(f"unknown decoder kind {self.kind!r}")

    def params(self) -> list[np.ndarray]:
        return self.net.params()

    def copy(self) -> "Decoder":
        return Decoder(self.net.copy(), self.kind)


@dataclass
class System:
    channel: ch.ChannelSpec
    encoders: list[Encoder]
    decoder: Decoder
    task: str = "classification"
    normalize: bool = False
    helpers: list[Mlp] = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.encoders) != self.channel.n_nodes:
            raise ShapeError("one encoder per node required")
        for n, (enc, k) in enumerate(zip(self.encoders, self.channel.k_per_node)):
            if enc.out_dim != k:
                raise ShapeError(f"encoder {n} emits {enc.out_dim} values, channel expects {k}")
        expected = self.decoder_in_dim(self.channel, self.decoder.kind)
        if self.decoder.net.in_dim != expected:
            raise ShapeError(f"decoder input {self.decoder.net.in_dim}, expected {expected}")

    @staticmethod
    def decoder_in_dim(spec: ch.ChannelSpec, kind: str) -> int:
        if kind == "standard":
            return spec.k_total
        if spec.kind != "orth_awgn" or len(set(spec.k_per_node)) != 1:
            raise ValueError("the shared PoE decoder needs an orthogonal channel with equal K_n")
        return spec.k_per_node[0] + spec.n_nodes

    @property
    def n_nodes(self) -> int:
        return self.channel.n_nodes

    def params(self) -> list[np.ndarray]:
        out = []
        for enc in self.encoders:
            out += enc.params()
        return out + self.decoder.params()

    def copy(self) -> "System":
        return System(
            self.channel,
            [e.copy() for e in self.encoders],
            self.decoder.copy(),
            self.task,
            self.normalize,
            [h.copy() for h in self.helpers],
        )


# -- construction ----------------------------------------------------------------

def build_encoder(in_dim: int, k_n: int, seed: int, node: int, hidden: Sequence[int] = (64, 64)) -> Encoder:
    net = seeded_init([in_dim, *hidden, k_n], seed, hidden="tanh", output="tanh", stream_key=f"enc{node}")
    return Encoder(net)


def build_embedded_encoder(
    in_dim: int, emb: ch.OrthoEmbedding, seed: int, node: int, inner_dim: int = 16, hidden: Sequence[int] = (64, 64)
) -> Encoder:
    """Encoder of the form T_n W_n g(x): inner MLP to ``inner_dim``, then a tanh layer W_n to R^r."""
    net = seeded_init([in_dim, *hidden, inner_dim, emb.r], seed, hidden="tanh", output="tanh", stream_key=f"enc{node}")
    return Encoder(net, emb.mats[node].copy(), False)


def build_decoder(in_dim: int, out_dim: int, seed: int, kind: str = "standard", hidden: Sequence[int] = (64, 64)) -> Decoder:
    net = seeded_init([in_dim, *hidden, out_dim], seed, hidden="relu", output="identity", stream_key=f"dec-{kind}")
    return Decoder(net, kind)


def build_helper(in_dim: int, out_dim: int, seed: int, node: int, hidden: int = 32) -> Mlp:
    return seeded_init([in_dim, hidden, out_dim], seed, hidden="relu", output="identity", stream_key=f"helper{node}")


def helper_in_dim(spec: ch.ChannelSpec, node: int) -> int:
    """Helpers see the full received vector on a GMAC and the node's own slot otherwise."""
    return spec.k_total if spec.kind == "gmac" else spec.k_per_node[node]


# -- encoder pass ----------------------------------------------------------------

def encode(enc: Encoder, x, k_n: int, p_t: float, normalize: bool):
    """Return ``(y, cache)`` for one node."""
    a, net_cache = forward_cached(enc.net, x)
    u = a if enc.embed is None else a @ enc.embed.T
    if normalize:
        y = ch.normalize_power(u, k_n, p_t)
    else:
        y = math.sqrt(p_t) * u
    return y, (x, a, u, net_cache)


def encode_backward(enc: Encoder, cache, gy, k_n: int, p_t: float, normalize: bool) -> list[np.ndarray]:
    x, a, u, net_cache = cache
    gu = ch.normalize_power_backward(u, gy, k_n, p_t) if normalize else math.sqrt(p_t) * gy
    if enc.embed is None:
        ga = gu
        extra = []
    else:
        ga = gu @ enc.embed
        extra = [gu.T @ a] if enc.embed_trainable else []
    grads, _ = mlp_backward(enc.net, x, ga, net_cache)
    return grads + extra


def encode_all(system: System, xs: Sequence[np.ndarray]):
    ys, caches = [], []
    for enc, x, k in zip(system.encoders, xs, system.channel.k_per_node):
        y, c = encode(enc, x, k, system.channel.p_t, system.normalize)
        ys.append(y)
        caches.append(c)
    return ys, caches


def transmit_clean(system: System, ys, active: Sequence[int] | None = None) -> np.ndarray:
    """Noise-free received vector; inactive nodes contribute zeros."""
    if active is not None:
        ys = [y if n in active else np.zeros_like(y) for n, y in enumerate(ys)]
    return ch.channel_sum(ys, system.channel)


# -- decoder pass ----------------------------------------------------------------

def _poe_inputs(system: System, yhat: np.ndarray, active: Sequence[int]) -> np.ndarray:
    spec = system.channel
    b = yhat.shape[0]
    parts = []
    for n in active:
        onehot = np.zeros((b, spec.n_nodes))
        onehot[:, n] = 1.0
        parts.append(np.concatenate([yhat[:, spec.offsets()[n]], onehot], axis=1))
    return np.concatenate(parts, axis=0)


def decode(system: System, yhat, active: Sequence[int] | None = None):
    """Return ``(output, cache)``.  Output is logits (classification) or the estimate (regression).

    For the shared PoE decoder the output is the sum of the active experts'
    logits, whose softmax is the normalised product of expert distributions.
    """
    yhat = np.asarray(yhat, dtype=np.float64)
    net = system.decoder.net
    if system.decoder.kind == "standard":
        out, cache = forward_cached(net, yhat)
        return out, ("standard", yhat, cache)
    active = list(range(system.n_nodes)) if active is None else sorted(active)
    if not active:
        raise ValueError("at least one expert must be active")
    inp = _poe_inputs(system, yhat, active)
    out, cache = forward_cached(net, inp)
    b = yhat.shape[0]
    logits = out.reshape(len(active), b, -1).sum(axis=0)
    return logits, ("poe", yhat, inp, cache, active)


def expert_logits(system: System, yhat, active: Sequence[int]) -> np.ndarray:
    """Per-expert logits, shape ``(len(active), batch, |V|)``."""
    inp = _poe_inputs(system, np.asarray(yhat, dtype=np.float64), list(active))
    out, _ = forward_cached(system.decoder.net, inp)
    return out.reshape(len(active), yhat.shape[0], -1)


def decode_backward(system: System, cache, gout):
    """Return ``(decoder_param_grads, grad_wrt_yhat)``."""
    net = system.decoder.net
    if cache[0] == "standard":
        _, yhat, net_cache = cache
        return mlp_backward(net, yhat, gout, net_cache)
    _, yhat, inp, net_cache, active = cache
    g = np.tile(gout, (len(active), 1))
    grads, ginp = mlp_backward(net, inp, g, net_cache)
    spec = system.channel
    b = yhat.shape[0]
    gy = np.zeros_like(yhat)
    k_n = spec.k_per_node[0]
    for i, n in enumerate(active):
        gy[:, spec.offsets()[n]] += ginp[i * b:(i + 1) * b, :k_n]
    return grads, gy
