"""Acceptance criteria on the synthetic tasks.

Each test prints one PASS/FAIL line (also repeated in the pytest terminal
summary) and asserts the same verdict.
"""
import numpy as np
import pytest

from fcsim import experiments as ex

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def parity():
    return {kind: ex.three_stage_parity(kind) for kind in ("orth_awgn", "gmac")}


@pytest.fixture(scope="module")
def convergence():
    return ex.convergence()


def _curve(xs):
    return "/".join(f"{x:.1f}" for x in xs)


def test_01_gradients(verdict):
    r = ex.gradient_check(instances=50)
    worst = max(r["max_rel_error"].values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in r["max_rel_error"].items())
    assert verdict(1, "gradient correctness", r["passed"], f"max rel error {worst:.1e} < 1e-5 ({detail})")


def test_02_power(verdict):
    r = ex.power_check()
    worst = max(max(p) for p in r["power_per_node"].values())
    detail = f"autoencoder |‖y‖²−K P_T| {r['autoencoder_max_abs_error']:.1e}; trained max E‖y_n‖²/K_n {worst:.3f} ≤ 1.05"
    assert verdict(2, "power constraint", r["passed"], detail)


def test_03_loss_ordering(verdict):
    r = ex.loss_ordering(seeds=5)
    m = r["median"]
    detail = (f"median IB {m['ib']:.2f}, Lagrange {m['lagrange']:.2f}, autoencoder {m['autoencoder']:.2f}; "
              f"IB − AE {m['ib'] - m['autoencoder']:.2f} (need ≥ 2)")
    assert verdict(3, "loss ordering", r["passed"], detail)


def test_04_three_stage_parity(verdict, parity):
    parts = []
    for kind, r in parity.items():
        parts.append(
            f"{kind}: dist {r['accuracy_distributed']:.2f} vs e2e {r['accuracy_e2e']:.2f}, "
            f"uplink {r['uplink_distributed']:.0f} < {r['uplink_e2e']:.0f}, T {r['rounds']} ≤ {r['remark1']['t_bound']}"
        )
    ok = all(r["passed"] for r in parity.values())
    assert verdict(4, "three-stage parity", ok, "; ".join(parts))


def test_05_theorem2(verdict, convergence):
    runs = convergence["runs"]
    margin = min(r["theorem2"]["margin"] for r in runs)
    final = max(r["final_grad_norm_sq"] for r in runs)
    lemma = sum(r["lemma1_violations"] for r in runs)
    detail = f"{len(runs)} runs, min margin {margin:.3g}, max final ‖∇L‖² {final:.1e}, Lemma 1 violations {lemma}"
    assert verdict(5, "Theorem 2", convergence["theorem2_passed"], detail)


def test_06_theorem3(verdict, convergence):
    rows = [x for r in convergence["runs"] for x in r["theorem3"]]
    margin = min(x["margin"] for x in rows)
    detail = f"{len(rows)} settings × 20 seeds, min margin {margin:.3g}"
    assert verdict(6, "Theorem 3", convergence["theorem3_passed"], detail)


def test_07_appendix_monitors(verdict, convergence):
    detail = f"{convergence['appendix_violations_total']} violations over {convergence['monitored_steps']} steps"
    assert verdict(7, "appendix monitors", convergence["appendix_passed"], detail)


def test_08_ledger(verdict, parity):
    arith = ex.ledger_arithmetic(tuples=100)
    e2e = ex.fit(ex.make_config(training={"epochs": 5}))
    live = [ex.live_ledger_matches(e2e, "e2e", "e2e", len(e2e.result.history))]
    live += [x for r in parity.values() for x in r["live_ledger"]]
    ok = arith["passed"] and all(x["passed"] for x in live)
    detail = f"{arith['mismatches']} mismatches over 100 tuples; live phases matching {sum(x['passed'] for x in live)}/{len(live)}"
    assert verdict(8, "ledger arithmetic", ok, detail)


def test_09_outage(verdict):
    r = ex.outage(seeds=5)
    m = r["median"]
    detail = (f"silent 0..3 PoE {_curve(m['poe'])} vs standard {_curve(m['standard'])}; "
              f"GMAC scaled {_curve(m['gmac_scaled'])} vs unscaled {_curve(m['gmac_unscaled'])}; "
              f"full-set gap {r['full_set_gap']:.2f}")
    assert verdict(9, "outage", r["passed"], detail)


def test_10_robustness(verdict):
    rs = [ex.robustness(kind) for kind in ("orth_awgn", "gmac")]
    worst = {r["channel"]: max(r["extreme_drop"].values()) for r in rs}
    detail = ", ".join(f"{k} worst drop {v:.2f}" for k, v in worst.items()) + " at 8-bit mismatch (≤ 5)"
    assert verdict(10, "robustness", all(r["passed"] for r in rs), detail)


def test_11_nomographic(verdict):
    r = ex.nomographic()
    assert verdict(11, "nomographic realizability", r["passed"], f"test MSE {r['test_mse']:.2e} < 1e-3")


def test_12_orthogonal_embedding(verdict):
    r = ex.embedding_check()
    detail = f"Gram {r['gram_error']:.1e}, recovery {r['recovery_error']:.1e}, leakage {r['leakage']:.1e}"
    assert verdict(12, "orthogonal embedding", r["passed"], detail)
    assert np.isfinite(r["stage1_helper_acc"]).all()
