"""End-to-end, three-stage and distributed stage-3 training procedures.

Randomness is drawn from named streams of the root seed:
``("init", ...)`` for parameters, ``("schedule", phase, epoch)`` for batch
order, ``("noise", phase, epoch)`` for channel noise during training,
``("eval", ...)`` for validation noise, ``("channel", ...)`` for the real
transmissions of the protocol and ``("node", n, phase, round)`` for per-node
simulated noise.  A node's stream depends only on its id and the round, so
the outcome does not depend on the order nodes are processed in.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from fcsim import channel as ch
from fcsim import objective as ob
from fcsim import system as sy
from fcsim.config import TrainingConfig
from fcsim.datagen import DistributedDataset
from fcsim.nn import Adam, PlateauHalver, mlp_forward, softmax_temp
from fcsim.protocol.inference import EvalResult, evaluate
from fcsim.protocol.ledger import CommLedger
from fcsim.rng import stream

Logger = Callable[[dict], None]


def _null_log(record: dict):
    pass


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def build_system(
    spec: ch.ChannelSpec,
    dataset: DistributedDataset,
    lcfg: ob.LossConfig,
    tcfg: TrainingConfig,
    seed: int,
    embedded: bool = False,
) -> sy.System:
    """Freshly initialised system; ``embedded`` gives GMAC encoders the T_n W_n g form."""
    task = dataset.task
    out_dim = dataset.out_dim
    dims = [x.shape[1] for x in dataset.views]
    if embedded:
        if spec.kind != "gmac":
            raise ValueError("subspace embedding is only used on a GMAC")
        emb = ch.make_embedding(spec.k_total, spec.n_nodes, seed)
        encs = [
            sy.build_embedded_encoder(d, emb, seed, n, tcfg.inner_dim, tcfg.encoder_hidden)
            for n, d in enumerate(dims)
        ]
    else:
        encs = [sy.build_encoder(d, k, seed, n, tcfg.encoder_hidden) for n, (d, k) in enumerate(zip(dims, spec.k_per_node))]
    dec_in = sy.System.decoder_in_dim(spec, tcfg.decoder)
    dec = sy.build_decoder(dec_in, out_dim, seed, tcfg.decoder, tcfg.decoder_hidden)
    helpers = []
    if task == "classification":
        helpers = [sy.build_helper(sy.helper_in_dim(spec, n), out_dim, seed, n, tcfg.helper_hidden) for n in range(spec.n_nodes)]
    return sy.System(spec, encs, dec, task, lcfg.method == "autoencoder", helpers)


def received_train(system: sy.System, xs, rng: np.random.Generator):
    ys, _ = sy.encode_all(system, xs)
    return ys, sy.transmit_clean(system, ys) + ob.sample_noise(system.channel, xs[0].shape[0], rng)


def full_gradient(system: sy.System, xs, v, lcfg: ob.LossConfig, rng: np.random.Generator):
    """Full-batch loss, flat parameters and flat gradient on one noise draw."""
    noise = ob.sample_noise(system.channel, xs[0].shape[0], rng)
    prior = None
    if lcfg.method == "ib":
        _, yhat = received_train(system, xs, np.random.default_rng(0))
        prior = ob.fit_prior(yhat)
    res = ob.system_loss(system, xs, v, noise, lcfg, prior)
    flat_p = np.concatenate([p.ravel() for p in system.params()])
    flat_g = np.concatenate([g.ravel() for g in res.grads])
    return res.value, flat_p, flat_g


def grad_norm_sq(system: sy.System, xs, v, lcfg: ob.LossConfig, rng: np.random.Generator) -> tuple[float, float]:
    """Full-batch loss and squared gradient norm of the system loss on one noise draw."""
    value, _, g = full_gradient(system, xs, v, lcfg, rng)
    return value, float(g @ g)


@dataclass
class PhaseResult:
    history: list[dict] = field(default_factory=list)
    final: EvalResult | None = None
    start: dict | None = None
    trajectory: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


# -- end to end ------------------------------------------------------------------

def train_e2e(
    system: sy.System,
    dataset: DistributedDataset,
    lcfg: ob.LossConfig,
    tcfg: TrainingConfig,
    seed: int,
    ledger: CommLedger,
    phase: str = "e2e",
    epochs: int | None = None,
    log: Logger = _null_log,
) -> PhaseResult:
    """Train encoders and decoder jointly over the simulated channel.

    Per minibatch of b examples node n spends K_n b uplink uses and the router
    returns dL/dyhat, counted as K b / 64 downlink uses.
    """
    epochs = tcfg.epochs if epochs is None else epochs
    spec = system.channel
    xs, v = dataset.part("train")
    xs_val, v_val = dataset.part("val")
    n = v.shape[0]
    opt = Adam(system.params(), tcfg.lr)
    halver = PlateauHalver(tcfg.patience, tcfg.min_delta)
    prior = None
    if lcfg.method == "ib":
        prior = ob.fit_prior(received_train(system, xs, stream(seed, "eval", phase, "prior"))[1])
    result = PhaseResult()
    for epoch in range(epochs):
        order = stream(seed, "schedule", phase, epoch)
        noise_rng = stream(seed, "noise", phase, epoch)
        total = 0.0
        for idx in batches(n, tcfg.batch_size, order):
            b = idx.size
            noise = ob.sample_noise(spec, b, noise_rng)
            res = ob.system_loss(system, [x[idx] for x in xs], v[idx], noise, lcfg, prior)
            opt.step(res.grads)
            total += res.value * b
            for node, k in spec.uplink_shares():
                ledger.add(phase, node, "uplink", k * b)
            ledger.add(phase, "all", "downlink", spec.k_total * b / 64)
        val_rng = stream(seed, "eval", phase, epoch)
        if prior is not None:
            prior = ob.fit_prior(received_train(system, xs_val, val_rng)[1])
        val = evaluate(system, xs_val, v_val, val_rng)
        opt.lr = halver.update(val.loss, opt.lr)
        rec = dict(phase=phase, epoch=epoch, loss=total / n, val_loss=val.loss, val_acc=val.accuracy,
                   val_mse=val.mse, lr=opt.lr, ledger=ledger.snapshot())
        result.history.append(rec)
        log(rec)
    result.final = evaluate(system, xs_val, v_val, stream(seed, "eval", phase, "final"))
    return result


# -- stage 1 ---------------------------------------------------------------------

def _node_prior(z: np.ndarray) -> ob.GaussianPrior:
    return ob.fit_prior(z)


def helper_accuracy(system: sy.System, node: int, x, v, rng: np.random.Generator) -> float:
    """Local accuracy of node ``node``'s helper on its own signal plus simulated noise."""
    spec = system.channel
    enc = system.encoders[node]
    y, _ = sy.encode(enc, x, spec.k_per_node[node], spec.p_t, system.normalize)
    z = ch.local_sim_channel(y, spec.sigma_z2, rng)
    logits = mlp_forward(system.helpers[node], z)
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == v))


def stage1_train(
    system: sy.System,
    dataset: DistributedDataset,
    lcfg: ob.LossConfig,
    tcfg: TrainingConfig,
    seed: int,
    ledger: CommLedger,
    log: Logger = _null_log,
) -> PhaseResult:
    """Independent local training of every encoder with its helper decoder.

    No channel uses are spent: the real channel is replaced by local noise.
    """
    if system.task != "classification":
        raise ValueError("stage 1 needs class labels at the nodes")
    spec = system.channel
    if spec.kind == "gmac" and any(e.embed is None for e in system.encoders):
        raise ValueError("GMAC stage 1 needs subspace-embedded encoders")
    before = ledger.snapshot()
    xs, v = dataset.part("train")
    xs_val, v_val = dataset.part("val")
    result = PhaseResult()
    for node, enc in enumerate(system.encoders):
        helper = system.helpers[node]
        k_n = spec.k_per_node[node]
        opt = Adam(enc.params() + helper.params(), tcfg.lr)
        init_rng = stream(seed, "node", node, "stage1", "prior")
        y0, _ = sy.encode(enc, xs[node], k_n, spec.p_t, system.normalize)
        prior = _node_prior(ch.local_sim_channel(y0, spec.sigma_z2, init_rng))
        for epoch in range(tcfg.stage1_epochs):
            rng = stream(seed, "node", node, "stage1", epoch)
            for idx in batches(v.shape[0], tcfg.batch_size, rng):
                offset = ch.gaussian_noise((idx.size, enc.out_dim), spec.sigma_z2, rng)
                res = ob.local_loss(enc, helper, xs[node][idx], v[idx], offset, lcfg, k_n, spec.p_t,
                                    system.normalize, prior)
                opt.step(res.enc_grads + res.helper_grads)
            y, _ = sy.encode(enc, xs[node], k_n, spec.p_t, system.normalize)
            prior = _node_prior(ch.local_sim_channel(y, spec.sigma_z2, rng))
        acc = helper_accuracy(system, node, xs_val[node], v_val, stream(seed, "eval", "stage1", node))
        rec = dict(phase="stage1", node=node, val_acc=acc)
        result.history.append(rec)
        log(rec)
    if ledger.snapshot() != before:
        raise AssertionError("stage 1 must not communicate")
    return result


# -- stage 2 / router training ------------------------------------------------------

def train_router(
    system: sy.System,
    yhat: np.ndarray,
    v,
    epochs: int,
    tcfg: TrainingConfig,
    seed: int,
    tag,
    distortion: str = "neg_log_likelihood",
):
    """Fit the decoder to fixed received vectors."""
    opt = Adam(system.decoder.params(), tcfg.lr)
    for epoch in range(epochs):
        rng = stream(seed, "schedule", "router", tag, epoch)
        for idx in batches(yhat.shape[0], tcfg.batch_size, rng):
            out, cache = sy.decode(system, yhat[idx])
            _, g = ob.distortion_terms(out, v[idx], distortion)
            grads, _ = sy.decode_backward(system, cache, g)
            opt.step(grads)


def transmit_training_set(system: sy.System, xs, phase: str, tag, seed: int, ledger: CommLedger):
    """One uplink pass of the whole training set in encoded form (K B uses)."""
    ys, yhat = received_train(system, xs, stream(seed, "channel", phase, tag))
    for node, k in system.channel.uplink_shares():
        ledger.add(phase, node, "uplink", k * xs[0].shape[0])
    return ys, yhat


def stage2_train(
    system: sy.System,
    dataset: DistributedDataset,
    tcfg: TrainingConfig,
    seed: int,
    ledger: CommLedger,
    log: Logger = _null_log,
) -> tuple[PhaseResult, list[np.ndarray], np.ndarray]:
    """Train the router decoder on a single encoded transmission of the training set."""
    xs, v = dataset.part("train")
    ys, yhat = transmit_training_set(system, xs, "stage2", 0, seed, ledger)
    if yhat.shape[1] != system.channel.k_total:
        raise ValueError("encoding dimension does not match the channel")
    kind = "neg_log_likelihood" if system.task == "classification" else "squared_error"
    train_router(system, yhat, v, tcfg.stage2_epochs, tcfg, seed, "stage2", kind)
    xs_val, v_val = dataset.part("val")
    result = PhaseResult(final=evaluate(system, xs_val, v_val, stream(seed, "eval", "stage2")))
    rec = dict(phase="stage2", val_loss=result.final.loss, val_acc=result.final.accuracy, ledger=ledger.snapshot())
    result.history.append(rec)
    log(rec)
    return result, ys, yhat


# -- stage 3 -----------------------------------------------------------------------

def lift(system: sy.System):
    """Remove the subspace constraint: embeddings become trainable output maps."""
    system.encoders = [e.lift() for e in system.encoders]


def stage3_finetune(
    system: sy.System,
    dataset: DistributedDataset,
    lcfg: ob.LossConfig,
    tcfg: TrainingConfig,
    seed: int,
    ledger: CommLedger,
    epochs: int | None = None,
    log: Logger = _null_log,
) -> PhaseResult:
    lift(system)
    epochs = tcfg.stage3_epochs if epochs is None else epochs
    return train_e2e(system, dataset, lcfg, tcfg, seed, ledger, "stage3", epochs, log)


def _teacher(system: sy.System, yhat: np.ndarray) -> np.ndarray:
    out, _ = sy.decode(system, yhat)
    return softmax_temp(out)


def stage3_distributed(
    system: sy.System,
    dataset: DistributedDataset,
    lcfg: ob.LossConfig,
    tcfg: TrainingConfig,
    seed: int,
    ledger: CommLedger,
    ys_sent: list[np.ndarray],
    yhat: np.ndarray,
    track_grad: bool = False,
    log: Logger = _null_log,
) -> PhaseResult:
    """Alternating node/router training with per-example feedback.

    Each round: the router broadcasts its class distribution q_d(.|yhat) for
    every training example (|V| values), plus yhat itself on a GMAC (K more),
    from which node n forms yhat_{-n} = yhat - y_n.  Every node then trains
    for E epochs against that frozen feedback, the nodes retransmit the
    training set and the router retrains on the fresh encodings.  Rounds stop
    once validation accuracy moves by less than ``stop_delta`` points.
    """
    if system.task != "classification":
        raise ValueError("distributed stage 3 needs a classification task")
    spec = system.channel
    gmac = spec.kind == "gmac"
    if gmac and system.decoder.kind != "standard":
        raise ValueError("the GMAC router uses a standard decoder")
    if not gmac and system.decoder.kind != "poe_shared":
        raise ValueError("the orthogonal-channel router must be a PoE decoder")
    lift(system)
    xs, v = dataset.part("train")
    xs_val, v_val = dataset.part("val")
    n_train = v.shape[0]
    n_classes = dataset.n_classes
    result = PhaseResult()
    prev_acc = evaluate(system, xs_val, v_val, stream(seed, "eval", "stage3", "start")).accuracy

    def track() -> tuple[float, float]:
        # one fixed noise draw, so successive points see the same objective
        loss, flat_p, flat_g = full_gradient(system, xs, v, lcfg, stream(seed, "eval", "grad"))
        result.trajectory.append((flat_p, flat_g))
        return loss, float(flat_g @ flat_g)

    if track_grad:
        loss, g2 = track()
        result.start = dict(train_loss=loss, grad_norm_sq=g2)
    for rnd in range(tcfg.max_rounds):
        q_d = _teacher(system, yhat)
        ledger.add("stage3", "all", "downlink", n_train * (n_classes + (spec.k_total if gmac else 0)))
        for node, enc in enumerate(system.encoders):
            helper = system.helpers[node]
            k_n = spec.k_per_node[node]
            rng = stream(seed, "node", node, "stage3", rnd)
            if gmac:
                rest = yhat - ys_sent[node]
                prior = ob.fit_prior(yhat)
            else:
                rest = None
                prior = ob.fit_prior(yhat[:, spec.offsets()[node]])
            opt = Adam(enc.params() + helper.params(), tcfg.lr)
            for _ in range(tcfg.E):
                for idx in batches(n_train, tcfg.batch_size, rng):
                    if gmac:
                        offset = rest[idx]
                        other = None
                    else:
                        offset = ch.gaussian_noise((idx.size, k_n), spec.sigma_z2, rng)
                        other = q_d[idx]
                    res = ob.local_loss(enc, helper, xs[node][idx], v[idx], offset, lcfg, k_n, spec.p_t,
                                        system.normalize, prior, teacher=q_d[idx], other=other)
                    opt.step(res.enc_grads + res.helper_grads)
        ys_sent, yhat = transmit_training_set(system, xs, "stage3", rnd, seed, ledger)
        train_router(system, yhat, v, tcfg.E, tcfg, seed, ("stage3", rnd))
        val = evaluate(system, xs_val, v_val, stream(seed, "eval", "stage3", rnd))
        rec = dict(phase="stage3", round=rnd + 1, val_loss=val.loss, val_acc=val.accuracy, ledger=ledger.snapshot())
        if track_grad:
            loss, g2 = track()
            rec.update(train_loss=loss, grad_norm_sq=g2)
        result.history.append(rec)
        log(rec)
        done = abs(val.accuracy - prev_acc) < tcfg.stop_delta
        prev_acc = val.accuracy
        if done:
            break
    result.final = evaluate(system, xs_val, v_val, stream(seed, "eval", "stage3", "final"))
    return result


@dataclass
class ThreeStageResult:
    stage1: PhaseResult
    stage2: PhaseResult
    stage3: PhaseResult

    @property
    def rounds(self) -> int:
        return len(self.stage3.history)


def run_three_stage(
    system: sy.System,
    dataset: DistributedDataset,
    lcfg: ob.LossConfig,
    tcfg: TrainingConfig,
    seed: int,
    ledger: CommLedger,
    distributed: bool = False,
    track_grad: bool = False,
    log: Logger = _null_log,
) -> ThreeStageResult:
    s1 = stage1_train(system, dataset, lcfg, tcfg, seed, ledger, log)
    s2, ys, yhat = stage2_train(system, dataset, tcfg, seed, ledger, log)
    if distributed:
        s3 = stage3_distributed(system, dataset, lcfg, tcfg, seed, ledger, ys, yhat, track_grad, log)
    else:
        s3 = stage3_finetune(system, dataset, lcfg, tcfg, seed, ledger, log=log)
    return ThreeStageResult(s1, s2, s3)
