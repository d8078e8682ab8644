import json

import numpy as np
import pytest
import yaml

from fcsim import cli
from fcsim import io as fio
from fcsim.protocol import build_system

SMALL = {
    "channel": {"n_nodes": 2, "k_n": 2, "sigma_z2": 0.1},
    "training": {"epochs": 2, "batch_size": 64, "encoder_hidden": [8], "decoder_hidden": [8],
                 "helper_hidden": 8, "inner_dim": 4, "stage1_epochs": 2, "stage2_epochs": 2,
                 "stage3_epochs": 1, "E": 1, "max_rounds": 2},
    "data": {"B": 400, "latent_dim": 8, "view_dim": 5},
    "loss": {"method": "ib"},
}


def _config(tmp_path, name="c.yaml", **sections):
    raw = {k: dict(v) for k, v in SMALL.items()}
    for k, v in sections.items():
        raw.setdefault(k, {}).update(v)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


def _run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture(scope="module")
def e2e_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("e2e")
    cfg = cli.ExperimentConfig.load(_config(d))
    summary = cli.train_experiment(cfg, d / "run")
    return d / "run", summary


class TestGenData:
    def test_writes_file_and_reports(self, tmp_path, capsys):
        rc, out, _ = _run(capsys, "gen-data", "--N", 2, "--B", 200, "--out", tmp_path / "d.csv")
        info = json.loads(out)
        assert rc == 0 and sum(info["counts"].values()) == 200
        assert fio.read_dataset(tmp_path / "d.csv").checksum() == info["checksum"]

    def test_nomographic(self, tmp_path, capsys):
        rc, out, _ = _run(capsys, "gen-data", "--generator", "nomographic", "--N", 3, "--B", 50,
                          "--out", tmp_path / "n.csv")
        assert rc == 0 and "oracle_accuracy" not in json.loads(out)


class TestTrain:
    def test_outputs(self, e2e_run):
        run, summary = e2e_run
        for name in ("checkpoint.bin", "metrics.jsonl", "ledger.csv", "summary.json", "config.yaml"):
            assert (run / name).exists()
        assert summary["epochs"] == 2 and 0.0 <= summary["test"]["accuracy"] <= 100.0
        assert fio.read_jsonl(run / "metrics.jsonl")[-1]["phase"] == "test"

    def test_zero_epochs_keeps_init_and_ledger_empty(self, tmp_path, capsys):
        cfg = _config(tmp_path, training={"epochs": 0})
        rc, out, _ = _run(capsys, "train", "--config", cfg, "--out", tmp_path / "a")
        assert rc == 0
        assert json.loads(out)["ledger"] == {"uplink": 0, "downlink": 0}
        c = cli.ExperimentConfig.load(cfg)
        init = build_system(c.channel.spec(), cli.make_dataset(c.data, 2), c.loss, c.training, 0)
        trained, _ = fio.load_checkpoint(tmp_path / "a" / "checkpoint.bin")
        for x, y in zip(init.params(), trained.params()):
            np.testing.assert_array_equal(x, y)

    def test_metrics_are_deterministic(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        for d in ("a", "b"):
            assert _run(capsys, "train", "--config", cfg, "--out", tmp_path / d)[0] == 0
        assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()

    def test_distributed_run_records_remark1(self, tmp_path, capsys):
        cfg = _config(tmp_path, training={"mode": "three_stage_distributed", "decoder": "poe_shared"})
        rc, out, _ = _run(capsys, "train", "--config", cfg, "--out", tmp_path / "d")
        summary = json.loads(out)
        assert rc == 0 and 1 <= summary["rounds"] <= 2
        assert {"t_bound", "passed"} <= summary["remark1"].keys()
        rc, out, _ = _run(capsys, "verify-convergence", "--objective", "nonconvex", "--blocks", 2, "--E", 1,
                          "--S", 300, "--seeds", 2, "--noise", 0.01, "--protocol-run", tmp_path / "d")
        report = json.loads(out)
        assert rc == 0 and report["protocol"][0] == summary["remark1"]
        assert report["monitored_steps"] == 600


class TestEval:
    def test_baseline_reproduces_training_accuracy(self, e2e_run, capsys):
        run, summary = e2e_run
        rc, out, _ = _run(capsys, "eval", "--checkpoint", run / "checkpoint.bin", "--outage", "1",
                          "--capacity", "4", "--sweep")
        rep = json.loads(out)
        assert rc == 0
        assert rep["baseline"]["accuracy"] == summary["test"]["accuracy"]
        assert rep["outage"][0]["inactive"] == [1]
        assert rep["capacity"][0]["c_te"] == 4.0
        assert rep["sweep"]["scaled"]["0"] == rep["baseline"]["accuracy"]

    def test_full_outage_rejected(self, e2e_run, capsys):
        rc, _, err = _run(capsys, "eval", "--checkpoint", e2e_run[0] / "checkpoint.bin", "--outage", "0,1")
        assert rc == 2 and json.loads(err)["error"] == "ValueError"

    def test_theorem1_report(self, e2e_run, capsys):
        rc, out, _ = _run(capsys, "theorem1-report", "--checkpoint", e2e_run[0] / "checkpoint.bin")
        rep = json.loads(out)
        assert rc == 0 and isinstance(rep["ib_tightest"], bool)


class TestLedger:
    def test_formula_only(self, capsys):
        rc, out, _ = _run(capsys, "ledger", "--method", "e2e", "--K", 4, "--B", 45000, "--T", 256, "--json")
        assert rc == 0
        assert json.loads(out) == [
            {"direction": "uplink", "formula": 46_080_000, "measured": None},
            {"direction": "downlink", "formula": 720_000, "measured": None},
        ]

    def test_measured_matches_formula(self, e2e_run, capsys):
        run, _ = e2e_run
        ds = cli.make_dataset(cli.ExperimentConfig.load(run / "config.yaml").data, 2)
        b_train = int(ds.indices("train").size)
        rc, out, _ = _run(capsys, "ledger", "--method", "e2e", "--K", 4, "--B", b_train, "--T", 2,
                          "--run", run / "ledger.csv", "--json")
        rows = json.loads(out)
        assert rc == 0 and all(r["formula"] == r["measured"] for r in rows)

    def test_table_output(self, capsys):
        rc, out, _ = _run(capsys, "ledger", "--method", "ib3s_awgn", "--K", 4, "--B", 10, "--T", 3, "--V-size", 4)
        assert rc == 0 and out.splitlines()[0].split() == ["direction", "formula", "measured"]


class TestErrors:
    def test_bad_config_is_json_error(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("training:\n  mode: online\n")
        rc, out, err = _run(capsys, "train", "--config", p)
        rec = json.loads(err)
        assert rc == 2 and out == "" and rec["error"] == "ConfigError" and rec["command"] == "train"

    def test_missing_checkpoint(self, tmp_path, capsys):
        rc, _, err = _run(capsys, "eval", "--checkpoint", tmp_path / "none.bin")
        assert rc == 2 and json.loads(err)["error"] == "FileNotFoundError"
