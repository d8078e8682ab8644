"""Command-line entry point: ``fcsim <subcommand> [options]``.

Every ``ExperimentConfig`` field is exposed as ``--section.field VALUE``
(values are parsed as YAML scalars or lists), applied on top of ``--config``.
Failures exit with status 2 after printing one JSON error record to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys
from pathlib import Path

import yaml

from fcsim import convergence as cv
from fcsim import datagen
from fcsim import io as fio
from fcsim import objective as ob
from fcsim.config import ChannelConfig, ConfigError, DataConfig, ExperimentConfig, OutputConfig, TrainingConfig
from fcsim.experiments import eval_stream, fit, make_dataset, outage_curve, with_capacity
from fcsim.protocol import CommLedger, OutageSet, evaluate, ledger_formulas
from fcsim.rng import stream

SECTIONS = {
    "channel": ChannelConfig, "loss": ob.LossConfig, "training": TrainingConfig,
    "data": DataConfig, "output": OutputConfig,
}


# -- configuration -----------------------------------------------------------------

def add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML experiment configuration")
    for section, typ in SECTIONS.items():
        g = p.add_argument_group(section)
        for f in dataclasses.fields(typ):
            g.add_argument(f"--{section}.{f.name}", dest=f"cfg__{section}__{f.name}", metavar="V")


def config_from_args(args) -> ExperimentConfig:
    raw = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    raw = raw or {}
    for key, value in vars(args).items():
        if key.startswith("cfg__") and value is not None:
            _, section, name = key.split("__")
            raw.setdefault(section, {})[name] = yaml.safe_load(value)
    return ExperimentConfig.from_dict(raw).validate()


# -- training ------------------------------------------------------------------------

def train_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> dict:
    """Run the configured mode; write checkpoint, metrics, ledger and summary into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = cfg.training
    ds = make_dataset(cfg.data, cfg.channel.n_nodes)
    if ds.n_nodes != cfg.channel.n_nodes:
        raise ConfigError(f"dataset has {ds.n_nodes} nodes, channel expects {cfg.channel.n_nodes}")
    summary: dict = {"mode": t.mode, "seed": t.seed, "dataset_checksum": ds.checksum()}
    (out / "config.yaml").write_text(cfg.dumps())
    with fio.MetricsWriter(out / "metrics.jsonl") as log:
        run = fit(cfg, ds, log)
        if t.mode == "e2e":
            summary["epochs"] = len(run.result.history)
        else:
            distributed = t.mode == "three_stage_distributed"
            summary["stage1_helper_acc"] = [r["val_acc"] for r in run.result.stage1.history]
            summary["rounds"] = run.result.rounds if distributed else None
            if run.remark1 is not None:
                summary["remark1"] = dataclasses.asdict(run.remark1) | {"passed": run.remark1.passed}
        summary["test"] = dataclasses.asdict(run.test)
        summary["ledger"] = run.ledger.snapshot()
        log({"phase": "test", **summary["test"], "ledger": summary["ledger"]})
    fio.save_checkpoint(out / "checkpoint.bin", run.system, {"config": cfg.to_dict(), "summary": summary})
    fio.ledger_to_file(run.ledger, out / "ledger.csv")
    (out / "summary.json").write_text(fio.dumps_json(summary) + "\n")
    return summary


def cmd_train(args) -> dict:
    cfg = config_from_args(args)
    return train_experiment(cfg, args.out or cfg.output.dir)


# -- evaluation ----------------------------------------------------------------------

def _parse_nodes(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip() != ""]


def outage_sweep(system, xs, v, seed: int, scale: bool = True) -> dict[int, float]:
    """Mean test accuracy over every set of k silent sensors, for k = 0..N-1."""
    return dict(enumerate(outage_curve(system, xs, v, seed, scale)))


def evaluate_checkpoint(path, outages=(), capacities=(), sweep: bool = False, scale: bool = True) -> dict:
    system, extra = fio.load_checkpoint(path)
    cfg = ExperimentConfig.from_dict(extra["config"])
    ds = make_dataset(cfg.data, cfg.channel.n_nodes)
    seed = cfg.training.seed
    xs, v = ds.part("test")
    report: dict = {"checkpoint": str(path), "decoder": system.decoder.kind, "channel": system.channel.kind}
    report["baseline"] = dataclasses.asdict(evaluate(system, xs, v, eval_stream(seed)))
    rows = []
    for nodes in outages:
        o = OutageSet.of(nodes)
        if len(o.active(system.n_nodes)) == 0:
            raise ValueError("outage leaves no active sensor")
        rows.append({"inactive": sorted(o.inactive), "scaled": scale,
                     **dataclasses.asdict(evaluate(system, xs, v, eval_stream(seed), o, scale))})
    report["outage"] = rows
    if sweep:
        report["sweep"] = {"scaled" if scale else "unscaled": outage_sweep(system, xs, v, seed, scale)}
        if system.channel.kind == "gmac":
            report["sweep"]["unscaled" if scale else "scaled"] = outage_sweep(system, xs, v, seed, not scale)
    report["capacity"] = [
        {"c_te": c, **dataclasses.asdict(evaluate(with_capacity(system, c), xs, v, eval_stream(seed)))}
        for c in capacities
    ]
    return report


def cmd_eval(args) -> dict:
    outages = [_parse_nodes(s) for s in args.outage or []]
    caps = [float(c) for c in args.capacity or []]
    return evaluate_checkpoint(args.checkpoint, outages, caps, args.sweep, not args.no_scale)


# -- convergence ---------------------------------------------------------------------

def verify_convergence(
    objectives=("nonconvex", "mlp"),
    blocks=(2, 5),
    local=(1, 5),
    S: int = 10_000,
    seeds: int = 20,
    noise=(0.01, 0.1),
    eta_frac: float = 0.9,
    trace_dir: str | None = None,
) -> dict:
    builders = {"nonconvex": cv.nonconvex_objective, "mlp": cv.mlp_objective}
    runs = []
    monitored = 0
    for name in objectives:
        obj = builders[name]()
        for nb, E in itertools.product(blocks, local):
            sch = cv.Schedule(nb, E, S)
            t = sch.tau
            eta2 = eta_frac * 2.0 / (2 * t + 1)
            tr = cv.run_abcd(obj, sch, eta2)
            params = cv.params_for(tr)
            v2 = cv.verify_theorem(tr, params)
            lemma = cv.monitor_lemma_noiseless(tr)
            app = cv.monitor_appendix_inequalities(tr)
            monitored += S
            if trace_dir:
                Path(trace_dir).mkdir(parents=True, exist_ok=True)
                fio.write_trace_csv(cv.trace_rows(tr), Path(trace_dir) / f"{name}_b{nb}_E{E}.csv")
            row = {
                "objective": name, "blocks": nb, "E": E, "tau": t, "L": obj.lipschitz,
                "theorem2": {"status": v2.status, "lhs": v2.lhs, "rhs": v2.rhs, "margin": v2.margin, "eta": eta2},
                "final_grad_norm_sq": float(tr.grad_norm_sq[S + 1]),
                "lemma1_violations": lemma.violations,
                "appendix_violations": {k: r.violations for k, r in app.items()},
            }
            eta5 = 0.5 / (t + 1)
            row["theorem3"] = []
            for var in noise:
                traces = []
                for sd in range(seeds):
                    trn = cv.run_abcd(obj, sch, eta5, [var] * nb, stream(sd, "convergence", name, nb, E, var))
                    traces.append(trn)
                    if sd == 0:
                        rep = cv.monitor_appendix_inequalities(trn)
                        row.setdefault("appendix_violations_noisy", {})[str(var)] = {k: r.violations for k, r in rep.items()}
                        monitored += S
                v3 = cv.verify_theorem(traces, cv.params_for(traces[0]), sigma2=var * nb)
                row["theorem3"].append({"sigma_n2": var, "status": v3.status, "lhs": v3.lhs, "rhs": v3.rhs,
                                        "margin": v3.margin, "eta": eta5})
            runs.append(row)
    passed = all(
        r["theorem2"]["status"] == "pass" and r["final_grad_norm_sq"] < 1e-4 and r["lemma1_violations"] == 0
        and not any(r["appendix_violations"].values())
        and all(x["status"] == "pass" for x in r["theorem3"])
        and not any(v for d in r.get("appendix_violations_noisy", {}).values() for v in d.values())
        for r in runs
    )
    growth = {str(n): t for n, t in cv.round_bound_growth().items()}
    return {"runs": runs, "monitored_steps": monitored, "all_passed": passed, "round_bound_growth": growth}


def protocol_remark1(run_dir: str | Path) -> dict:
    summary = json.loads((Path(run_dir) / "summary.json").read_text())
    if "remark1" not in summary:
        raise ValueError(f"{run_dir} is not a distributed three-stage run")
    return summary["remark1"]


def cmd_verify_convergence(args) -> dict:
    report = verify_convergence(
        args.objective or ("nonconvex", "mlp"), args.blocks or (2, 5), args.E or (1, 5), args.S, args.seeds,
        args.noise or (0.01, 0.1), args.eta_frac, args.trace_dir,
    )
    if args.protocol_run:
        report["protocol"] = [protocol_remark1(d) for d in args.protocol_run]
    return report


# -- ledger ------------------------------------------------------------------------

DEFAULT_PHASE = {"e2e": "e2e", "ib3s_awgn": "stage3", "ib3s_gmac": "stage3"}


def ledger_table(method: str, K: int, B: int, T: int, V_size: int, run: str | None = None, phase: str | None = None) -> list[dict]:
    formula = ledger_formulas(method, K, B, T, V_size)
    measured = {}
    if run:
        led = CommLedger.from_csv(Path(run).read_text())
        ph = phase or DEFAULT_PHASE[method]
        measured = {d: led.total(d, ph) for d in ("uplink", "downlink")}
    return [{"direction": d, "formula": formula[d], "measured": measured.get(d)} for d in ("uplink", "downlink")]


def cmd_ledger(args) -> list[dict]:
    rows = ledger_table(args.method, args.K, args.B, args.T, args.V_size, args.run, args.phase)
    if not args.json:
        print(f"{'direction':<10} {'formula':>16} {'measured':>16}")
        for r in rows:
            m = "-" if r["measured"] is None else f"{r['measured']:g}"
            print(f"{r['direction']:<10} {r['formula']:>16g} {m:>16}")
        return None
    return rows


# -- data and theorem 1 -------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    if args.generator == "mixture":
        ds = datagen.gen_mixture_classification(
            args.N, args.V_size, args.latent_dim, args.view_dim, args.overlap_frac, args.B, args.separation,
            args.noise_std, args.seed,
        )
    else:
        ds = datagen.gen_nomographic_regression(args.N, args.B, args.seed, args.fn)
    fio.write_dataset(ds, args.out)
    info = {"path": args.out, "checksum": ds.checksum(), "counts": {s: int(ds.indices(s).size) for s in datagen.SPLITS}}
    if ds.task == "classification":
        info["oracle_accuracy"] = datagen.nearest_mean_accuracy(ds)
    return info


def cmd_theorem1(args) -> dict:
    system, extra = fio.load_checkpoint(args.checkpoint)
    cfg = ExperimentConfig.from_dict(extra["config"])
    ds = make_dataset(cfg.data, cfg.channel.n_nodes)
    xs, v = ds.part(args.split)
    lam = cfg.loss.lam if args.lam is None else args.lam
    rep = ob.theorem1_report(system, xs, v, lam, stream(cfg.training.seed, "eval", "theorem1"))
    return dataclasses.asdict(rep) | {"ib_tightest": rep.ib_tightest}


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcsim", description="Distributed functional compression simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset file")
    g.add_argument("--generator", choices=("mixture", "nomographic"), default="mixture")
    g.add_argument("--N", type=int, default=4)
    g.add_argument("--V-size", dest="V_size", type=int, default=4)
    g.add_argument("--latent-dim", type=int, default=16)
    g.add_argument("--view-dim", type=int, default=8)
    g.add_argument("--overlap-frac", type=float, default=0.25)
    g.add_argument("--B", type=int, default=4096)
    g.add_argument("--separation", type=float, default=6.0)
    g.add_argument("--noise-std", type=float, default=0.25)
    g.add_argument("--fn", choices=("product", "geometric_mean"), default="product")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a system; writes checkpoint, metrics and ledger")
    add_config_flags(t)
    t.add_argument("--out", help="output directory (default: output.dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under outage or capacity mismatch")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--outage", action="append", help="comma-separated silent node ids (repeatable)")
    e.add_argument("--sweep", action="store_true", help="accuracy versus number of silent sensors")
    e.add_argument("--capacity", action="append", help="test-time capacity C_te in bits (repeatable)")
    e.add_argument("--no-scale", action="store_true", help="disable GMAC N/|S| rescaling")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify-convergence", help="run the convergence suites")
    v.add_argument("--objective", action="append", choices=("nonconvex", "mlp"))
    v.add_argument("--blocks", type=int, action="append", help="N+1 (repeatable)")
    v.add_argument("--E", type=int, action="append")
    v.add_argument("--S", type=int, default=10_000)
    v.add_argument("--seeds", type=int, default=20)
    v.add_argument("--noise", type=float, action="append", help="per-block noise variance (repeatable)")
    v.add_argument("--eta-frac", type=float, default=0.9, help="noiseless step as a fraction of its limit")
    v.add_argument("--trace-dir")
    v.add_argument("--protocol-run", action="append", help="distributed run directory to check against Remark 1")
    v.set_defaults(func=cmd_verify_convergence)

    led = sub.add_parser("ledger", help="channel-use totals from the formulas and a run ledger")
    led.add_argument("--method", choices=tuple(DEFAULT_PHASE), required=True)
    led.add_argument("--K", type=int, required=True)
    led.add_argument("--B", type=int, required=True)
    led.add_argument("--T", type=int, required=True)
    led.add_argument("--V-size", dest="V_size", type=int, default=0)
    led.add_argument("--run", help="ledger.csv of a run")
    led.add_argument("--phase")
    led.add_argument("--json", action="store_true")
    led.set_defaults(func=cmd_ledger)

    th = sub.add_parser("theorem1-report", help="compare the three variational bounds on a checkpoint")
    th.add_argument("--checkpoint", required=True)
    th.add_argument("--split", choices=datagen.SPLITS, default="test")
    th.add_argument("--lam", type=float)
    th.set_defaults(func=cmd_theorem1)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except (ConfigError, fio.FormatError, cv.AssumptionError, ValueError, FileNotFoundError, KeyError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 2
    if result is not None:
        print(fio.dumps_json(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
