import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcsim import channel as ch
from fcsim import datagen as dg
from fcsim import objective as ob
from fcsim import system as sy
from fcsim.config import ChannelConfig, TrainingConfig
from fcsim.nn import Layer, Mlp, softmax_temp
from fcsim.protocol import (
    CommLedger, OutageSet, build_system, compute_Zn, infer, ledger_formulas, poe_combine, run_three_stage,
    stage1_train, stage2_train, stage3_distributed, stage3_finetune, train_e2e,
)
from fcsim.protocol import training as tr
from fcsim.protocol.inference import evaluate, received
from fcsim.protocol.ledger import LedgerError
from tests.conftest import flat_params

FAST = dict(encoder_hidden=[16], decoder_hidden=[16], helper_hidden=16, inner_dim=4, batch_size=64)


@pytest.fixture(scope="module")
def mixture():
    return dg.gen_mixture_classification(N=2, B=600, seed=0)


def _ib():
    return ob.LossConfig("ib", 1e-3)


def _spec(kind="orth_awgn", n=2, k=2, sigma2=0.2):
    return ChannelConfig(kind, n, k, 1.0, sigma_z2=sigma2).spec()


class TestLedger:
    def test_formula_examples(self):
        e = ledger_formulas("e2e", 4, 45000, 256)
        assert e == {"uplink": 46_080_000, "downlink": 720_000}
        assert ledger_formulas("ib3s_awgn", 4, 45000, 3, 10)["downlink"] == 1_350_000
        assert ledger_formulas("ib3s_gmac", 4, 45000, 3, 10)["downlink"] == 45000 * 3 * 14
        assert ledger_formulas("e2e", 4, 10, 0) == {"uplink": 0, "downlink": 0}

    def test_formula_errors(self):
        with pytest.raises(LedgerError):
            ledger_formulas("cloud", 1, 1, 1)
        with pytest.raises(LedgerError):
            ledger_formulas("e2e", 1.5, 1, 1)

    def test_counters(self):
        led = CommLedger()
        led.add("e2e", 0, "uplink", 3)
        led.add("e2e", 1, "uplink", 4)
        led.add("e2e", "all", "downlink", 0.5)
        assert led.total("uplink") == 7 and led.total(node=1) == 4 and led.total("downlink", "e2e") == 0.5
        with pytest.raises(LedgerError):
            led.add("e2e", 0, "uplink", -1)
        with pytest.raises(LedgerError):
            led.add("warmup", 0, "uplink", 1)
        with pytest.raises(LedgerError):
            led.add("e2e", 0, "sideways", 1)

    def test_csv_round_trip(self):
        led = CommLedger()
        led.add("stage2", 0, "uplink", 4096)
        led.add("stage3", "all", "downlink", 1228.875)
        text = led.to_csv()
        assert text.splitlines()[0] == "phase,node,direction,channel_uses"
        assert CommLedger.from_csv(text).rows() == led.rows()


class TestPoe:
    def test_zn_examples(self):
        assert compute_Zn([0.6, 0.4], [[0.7, 0.3]]) == pytest.approx(0.54, abs=1e-15)
        assert compute_Zn([0.6, 0.4], []) == pytest.approx(1.0, abs=1e-15)
        for v, n in ((2, 3), (4, 2), (10, 4)):
            u = np.full(v, 1 / v)
            assert compute_Zn(u, [u] * (n - 1)) == pytest.approx((1 / v) ** (n - 1), rel=1e-12)
        with pytest.raises(ValueError):
            compute_Zn([0.5, 0.5], [[1.0, 0.0, 0.0]])

    @given(st.integers(2, 6), st.integers(0, 4), st.integers(0, 10_000))
    def test_zn_range(self, v, others, seed):
        rng = np.random.default_rng(seed)
        q = rng.dirichlet(np.ones(v))
        z = compute_Zn(q, [rng.dirichlet(np.ones(v)) for _ in range(others)])
        assert 0 < z <= 1 + 1e-15

    def test_combine_examples(self):
        np.testing.assert_allclose(poe_combine([[0.3, 0.7]]), [0.3, 0.7])
        np.testing.assert_allclose(poe_combine([[0.5, 0.5], [0.8, 0.2]]), [0.8, 0.2], atol=1e-15)
        with pytest.raises(ValueError):
            poe_combine([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            poe_combine([])

    @given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 10_000))
    def test_combine_normalised_and_uniform_cancels(self, v, n, seed):
        rng = np.random.default_rng(seed)
        experts = [rng.dirichlet(np.ones(v)) for _ in range(n)]
        out = poe_combine(experts)
        assert abs(out.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(poe_combine(experts + [np.full(v, 1 / v)]), out, atol=1e-12)

    def test_poe_decoder_is_product_of_experts(self):
        s = tr.build_system(_spec(), dg.gen_mixture_classification(N=2, B=50), _ib(),
                            TrainingConfig(decoder="poe_shared", **FAST), 0)
        yhat = np.random.default_rng(0).standard_normal((5, 4))
        experts = sy.expert_logits(s, yhat, [0, 1])
        out, _ = sy.decode(s, yhat)
        np.testing.assert_allclose(softmax_temp(out), poe_combine([softmax_temp(e) for e in experts]), atol=1e-12)


class TestInference:
    def test_no_outage_is_plain_forward(self, mixture):
        s = build_system(_spec(), mixture, _ib(), TrainingConfig(**FAST), 0)
        xs, _ = mixture.part("test")
        noise = ob.sample_noise(s.channel, xs[0].shape[0], np.random.default_rng(1))
        ys, _ = sy.encode_all(s, xs)
        out, _ = sy.decode(s, sy.transmit_clean(s, ys) + noise)
        assert np.array_equal(infer(s, xs, noise), softmax_temp(out))
        assert np.array_equal(infer(s, xs, noise, OutageSet.of([])), softmax_temp(out))

    def test_gmac_rescaling(self):
        spec = ch.ChannelSpec.make("gmac", 4, 2, 1.0, 0.0)
        eye = np.eye(2)
        # every node forwards its input; the two active ones send [0.5, 0.5]
        encs = [sy.Encoder(Mlp([Layer(eye, np.zeros(2))])) for _ in range(4)]
        dec = sy.build_decoder(2, 2, 0, hidden=(3,))
        s = sy.System(spec, encs, dec, "classification", False)
        xs = [np.array([[0.5, 0.5]])] * 4
        got = received(s, xs, np.zeros((1, 2)), OutageSet.of([2, 3]))
        np.testing.assert_array_equal(got, [[2.0, 2.0]])
        got = received(s, xs, np.zeros((1, 2)), OutageSet.of([2, 3]), scale=False)
        np.testing.assert_array_equal(got, [[1.0, 1.0]])

    def test_awgn_zero_fill(self, mixture):
        s = build_system(_spec(), mixture, _ib(), TrainingConfig(**FAST), 0)
        xs, _ = mixture.part("test")
        noise = np.ones((xs[0].shape[0], 4))
        got = received(s, xs, noise, OutageSet.of([1]))
        assert not got[:, 2:].any() and got[:, :2].any()

    def test_single_active_expert(self, mixture):
        s = build_system(_spec(), mixture, _ib(), TrainingConfig(decoder="poe_shared", **FAST), 0)
        xs, _ = mixture.part("test")
        noise = ob.sample_noise(s.channel, xs[0].shape[0], np.random.default_rng(2))
        yhat = received(s, xs, noise, OutageSet.of([0]))
        expert = softmax_temp(sy.expert_logits(s, yhat, [1])[0])
        np.testing.assert_allclose(infer(s, xs, noise, OutageSet.of([0])), expert, atol=1e-14)

    def test_empty_active_set(self, mixture):
        s = build_system(_spec(), mixture, _ib(), TrainingConfig(**FAST), 0)
        xs, _ = mixture.part("test")
        with pytest.raises(ValueError):
            infer(s, xs, np.zeros((xs[0].shape[0], 4)), OutageSet.of([0, 1]))
        with pytest.raises(ValueError):
            OutageSet.of([5]).active(2)


class TestEndToEnd:
    def test_nomographic_regression(self):
        ds = dg.gen_nomographic_regression(N=2, B=1024, seed=0)
        spec = _spec(k=1, sigma2=0.0)
        lc = ob.LossConfig("lagrange", 0.0, distortion="squared_error")
        tc = TrainingConfig(epochs=150, lr=3e-3, patience=10**9)
        s = build_system(spec, ds, lc, tc, 0)
        train_e2e(s, ds, lc, tc, 0, CommLedger())
        xs, v = ds.part("train")
        steps = 150 * math.ceil(v.shape[0] / 64)
        assert steps <= 5000
        assert evaluate(s, xs, v, np.random.default_rng(0)).mse < 1e-2

    def test_full_batch_ledger(self, mixture):
        tc = TrainingConfig(epochs=3, **(FAST | dict(batch_size=10_000)))
        s = build_system(_spec(), mixture, _ib(), tc, 0)
        led = CommLedger()
        train_e2e(s, mixture, _ib(), tc, 0, led)
        b = mixture.indices("train").size
        assert led.total("uplink") == ledger_formulas("e2e", 4, b, 3)["uplink"]
        assert led.total("downlink") == pytest.approx(ledger_formulas("e2e", 4, b, 3)["downlink"])
        assert led.total("uplink", node=0) == led.total("uplink", node=1) == 2 * b * 3

    def test_gmac_uplink_counts_shared_slots(self, mixture):
        tc = TrainingConfig(epochs=2, **FAST)
        s = build_system(_spec("gmac", k=4), mixture, _ib(), tc, 0)
        led = CommLedger()
        train_e2e(s, mixture, _ib(), tc, 0, led)
        assert led.total("uplink") == 4 * mixture.indices("train").size * 2

    def test_zero_learning_rate(self):
        ds = dg.gen_mixture_classification(N=2, B=300, seed=1)
        tc = TrainingConfig(epochs=3, lr=0.0, **FAST)
        lc = ob.LossConfig("lagrange", 1e-3)
        s = build_system(_spec(sigma2=0.0), ds, lc, tc, 0)
        before = flat_params(s)
        res = train_e2e(s, ds, lc, tc, 0, CommLedger())
        assert np.array_equal(flat_params(s), before)
        losses = [r["loss"] for r in res.history]
        # batches are reshuffled each epoch, so only the summation order differs
        assert max(losses) - min(losses) < 1e-12


@pytest.fixture(scope="module")
def awgn_stages(mixture):
    tc = TrainingConfig(decoder="poe_shared", stage1_epochs=15, stage2_epochs=15, E=2, max_rounds=2, **FAST)
    s = build_system(_spec(sigma2=0.3), mixture, _ib(), tc, 0)
    led = CommLedger()
    s1 = stage1_train(s, mixture, _ib(), tc, 0, led)
    snap1 = led.snapshot()
    s2, ys, yhat = stage2_train(s, mixture, tc, 0, led)
    return dict(system=s, ledger=led, s1=s1, s2=s2, snap1=snap1, ys=ys, yhat=yhat, tc=tc)


class TestThreeStage:
    def test_stage1_is_silent_and_learns(self, awgn_stages):
        assert awgn_stages["snap1"] == {"uplink": 0.0, "downlink": 0.0}
        for rec in awgn_stages["s1"].history:
            assert rec["val_acc"] >= 25.0 + 20.0

    def test_stage1_loss_reduces_to_local_nll(self):
        s = build_system(_spec(sigma2=0.0), dg.gen_mixture_classification(N=2, B=50), _ib(),
                                TrainingConfig(**FAST), 0)
        x = np.random.default_rng(0).standard_normal((6, 8))
        v = np.arange(6) % 4
        res = ob.local_loss(s.encoders[0], s.helpers[0], x, v, np.zeros((6, 2)), ob.LossConfig("ib", 0.0), 2, 1.0,
                            False, ob.GaussianPrior(2))
        y, _ = sy.encode(s.encoders[0], x, 2, 1.0, False)
        logits = sy.forward_cached(s.helpers[0], y)[0]
        nll = -np.log(softmax_temp(logits)[np.arange(6), v])
        assert res.value == pytest.approx(float(nll.mean()), rel=1e-13)

    def test_stage2_uplink_is_one_pass(self, awgn_stages):
        b = awgn_stages["yhat"].shape[0]
        assert awgn_stages["ledger"].total("uplink", "stage2") == 4 * b
        assert ledger_formulas("e2e", 4, 1024, 1)["uplink"] == 4096

    def test_stage2_reproducible(self, mixture, awgn_stages):
        tc = awgn_stages["tc"]
        s = build_system(_spec(sigma2=0.3), mixture, _ib(), tc, 0)
        led = CommLedger()
        stage1_train(s, mixture, _ib(), tc, 0, led)
        stage2_train(s, mixture, tc, 0, led)
        assert np.array_equal(flat_params(s), flat_params(awgn_stages["system"]))

    def test_stage2_separable_encodings(self):
        # frozen encodings that carry the label linearly: the router fits them
        rng = np.random.default_rng(0)
        spec = _spec("orth_awgn", 1, 4, 0.0)
        ds = dg.gen_mixture_classification(N=1, view_dim=16, latent_dim=16, B=800, separation=8.0, noise_std=0.1)
        tc = TrainingConfig(stage2_epochs=30, **FAST)
        s = build_system(spec, ds, _ib(), tc, 0)
        xs, v = ds.part("train")
        yhat = np.eye(4)[v] * 2.0 + 0.1 * rng.standard_normal((v.size, 4))
        tr.train_router(s, yhat, v, 30, tc, 0, "t")
        out, _ = sy.decode(s, yhat)
        assert np.mean(np.argmax(out, axis=1) == v) > 0.95

    def test_gmac_stage1_needs_embedding(self, mixture):
        s = build_system(_spec("gmac", k=4), mixture, _ib(), TrainingConfig(**FAST), 0)
        with pytest.raises(ValueError):
            stage1_train(s, mixture, _ib(), TrainingConfig(**FAST), 0, CommLedger())

    def test_embedded_encoders_do_not_leak(self, mixture):
        tc = TrainingConfig(**FAST)
        s = build_system(_spec("gmac", n=2, k=4), mixture, _ib(), tc, 0, embedded=True)
        xs, _ = mixture.part("test")
        ys, _ = sy.encode_all(s, xs)
        for n, y in enumerate(ys):
            for m, enc in enumerate(s.encoders):
                if m != n:
                    assert np.max(np.abs(y @ enc.embed)) < 1e-12

    def test_finetune_zero_epochs(self, mixture):
        tc = TrainingConfig(stage1_epochs=1, stage2_epochs=1, stage3_epochs=0, **FAST)
        s = build_system(_spec(), mixture, _ib(), tc, 0)
        led = CommLedger()
        stage1_train(s, mixture, _ib(), tc, 0, led)
        stage2_train(s, mixture, tc, 0, led)
        before, snap = flat_params(s), led.snapshot()
        stage3_finetune(s, mixture, _ib(), tc, 0, led)
        assert np.array_equal(flat_params(s), before) and led.snapshot() == snap

    def test_finetune_improves_and_counts(self, mixture):
        tc = TrainingConfig(stage1_epochs=5, stage2_epochs=5, stage3_epochs=3, **FAST)
        s = build_system(_spec(), mixture, _ib(), tc, 0)
        led = CommLedger()
        res = run_three_stage(s, mixture, _ib(), tc, 0, led)
        b = mixture.indices("train").size
        assert led.total("uplink", "stage3") == 4 * b * 3
        assert res.stage3.history[-1]["val_loss"] <= res.stage2.final.loss


class TestDistributed:
    def _run(self, mixture, kind, decoder, seed=0):
        tc = TrainingConfig(decoder=decoder, stage1_epochs=3, stage2_epochs=3, E=1, max_rounds=2, stop_delta=-1.0,
                            **FAST)
        spec = _spec(kind, k=4 if kind == "gmac" else 2)
        s = build_system(spec, mixture, _ib(), tc, seed, embedded=kind == "gmac")
        led = CommLedger()
        res = run_three_stage(s, mixture, _ib(), tc, seed, led, distributed=True, track_grad=True)
        return s, led, res

    @pytest.mark.parametrize("kind,decoder,per_round", [("orth_awgn", "poe_shared", 4), ("gmac", "standard", 4 + 4)])
    def test_round_ledger(self, mixture, kind, decoder, per_round):
        _, led, res = self._run(mixture, kind, decoder)
        b = mixture.indices("train").size
        assert res.rounds == 2
        prev = res.stage2.history[-1]["ledger"]
        for rec in res.stage3.history:
            snap = rec["ledger"]
            assert snap["downlink"] - prev["downlink"] == b * per_round
            assert snap["uplink"] - prev["uplink"] == 4 * b
            prev = snap
        assert led.total("uplink", "stage1") == 0

    def test_deterministic(self, mixture):
        a = self._run(mixture, "orth_awgn", "poe_shared")
        b = self._run(mixture, "orth_awgn", "poe_shared")
        assert np.array_equal(flat_params(a[0]), flat_params(b[0]))
        assert a[2].stage3.history == b[2].stage3.history

    def test_gradient_tracking(self, mixture):
        _, _, res = self._run(mixture, "gmac", "standard")
        assert res.stage3.start["grad_norm_sq"] > 0
        assert len(res.stage3.trajectory) == 1 + res.rounds
        assert all("grad_norm_sq" in r for r in res.stage3.history)

    def test_router_kind_checked(self, mixture):
        tc = TrainingConfig(**FAST)
        s = build_system(_spec(), mixture, _ib(), tc, 0)
        with pytest.raises(ValueError):
            stage3_distributed(s, mixture, _ib(), tc, 0, CommLedger(), [], np.zeros((1, 4)))

    def test_uniform_teacher_gives_no_z_gradient(self):
        s = build_system(_spec(), dg.gen_mixture_classification(N=2, B=50), _ib(), TrainingConfig(**FAST), 0)
        rng = np.random.default_rng(4)
        x, v = rng.standard_normal((5, 8)), np.arange(5) % 4
        off = rng.standard_normal((5, 2))
        args = (s.encoders[0], s.helpers[0], x, v, off, _ib(), 2, 1.0, False, ob.GaussianPrior(2))
        a = ob.local_loss(*args)
        b = ob.local_loss(*args, other=np.full((5, 4), 0.25))
        assert b.value - a.value == pytest.approx(math.log(4), abs=1e-12)
        for ga, gb in zip(a.enc_grads + a.helper_grads, b.enc_grads + b.helper_grads):
            np.testing.assert_allclose(ga, gb, atol=1e-15)
