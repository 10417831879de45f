import csv
import json

import numpy as np
import pytest

from fedalign import nn_core
from fedalign.cli import dispatch
from fedalign.config import ConfigError, ExperimentConfig, parse_config, serialize
from fedalign.snapshot import load_model, save_model

SMALL = [
    "--n_clients", "3", "--rounds", "2", "--local_steps", "3", "--k_classes", "4",
    "--x_dim", "4", "--y_dim", "4", "--hidden_dim", "6", "--embed_dim", "5",
    "--samples_per_class", "60", "--eval_pool_size", "10", "--dirichlet_concentration", "100",
]  # fmt: skip


def test_empty_document_gives_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    cfg = parse_config(path)
    assert (cfg.tau, cfg.alpha, cfg.beta, cfg.rho, cfg.gamma) == (0.1, 1.0, 2.0, 1.0, 0.5)
    assert (cfg.n_clients, cfg.rounds, cfg.local_steps) == (5, 25, 50)
    assert cfg == ExperimentConfig()


@pytest.mark.parametrize(
    "bad, field",
    [({"tau": -1}, "tau"), ({"tau": 0}, "tau"), ({"n_clients": 0}, "n_clients"), ({"rho": -0.1}, "rho"),
     ({"strategy": "sgd"}, "strategy"), ({"test_fraction": 1.0}, "test_fraction"), ({"eval_k_list": [0]}, "eval_k_list")],
)  # fmt: skip
def test_invalid_values_name_the_field(bad, field):
    with pytest.raises(ConfigError, match=field):
        parse_config(overrides=bad)


def test_unknown_key_and_malformed_json(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        parse_config(overrides={"colour": 1})
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config(path)


def test_serialize_roundtrip(tmp_path):
    cfg = parse_config(overrides={"lr": 0.3, "strategy": "fedavg", "eval_k_list": [5, 1]})
    path = tmp_path / "c.json"
    path.write_text(serialize(cfg))
    assert parse_config(path) == cfg
    assert parse_config(path).config_hash() == cfg.config_hash()
    assert cfg.replace(out_dir="elsewhere").config_hash() == cfg.config_hash()


def test_snapshot_roundtrip(tmp_path):
    m = nn_core.init_model(nn_core.ModelDims(3, 4, 5, 6, 2, 2), 3)
    back = load_model(save_model(m, tmp_path / "m.bin"))
    assert back == m
    raw = (tmp_path / "m.bin").read_bytes()
    header_len = int.from_bytes(raw[:8], "little")
    assert np.array_equal(np.frombuffer(raw[8 + header_len :], "<f8"), m.values)
    (tmp_path / "bad.bin").write_bytes(b"\x01")
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad.bin")


def test_check_bounds_exit_zero(tmp_path, capsys):
    assert dispatch(["check-bounds", "--seed", "7", "--instances", "200", "--out_dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "bounds_report.json").read_text())
    assert report["asserted_violations"] == 0


def test_usage_and_config_errors(tmp_path):
    assert dispatch(["frobnicate"]) == 1
    assert dispatch([]) == 1
    assert dispatch(["train", "--tau", "-1", "--out_dir", str(tmp_path)]) == 1
    assert dispatch(["train", "--no-such-flag"]) == 1
    assert dispatch(["train", "--config", str(tmp_path / "missing.json")]) == 1


def test_runtime_error_exit_two(tmp_path):
    # evaluating a run directory without a snapshot
    assert dispatch(["evaluate", "--out_dir", str(tmp_path / "empty")] + SMALL) == 2


def test_train_zero_rounds_empty_jsonl(tmp_path):
    out = tmp_path / "r0"
    assert dispatch(["train", "--strategy", "fedavg", "--rounds", "0", "--out_dir", str(out)]) == 0
    assert (out / "metrics.jsonl").read_bytes() == b""
    assert load_model(out / "final_model.bin").values.size > 0


def test_train_outputs_are_byte_deterministic(tmp_path):
    runs = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "2")):
        out = tmp_path / name
        assert dispatch(["train", "--seed", "3", "--quiet", "--threads", threads, "--out_dir", str(out)] + SMALL) == 0
        runs.append(out)
    first = runs[0]
    for other in runs[1:]:
        for f in ("metrics.jsonl", "final_model.bin"):
            assert (first / f).read_bytes() == (other / f).read_bytes()
    lines = (first / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    for key in ("round", "v", "w", "loss_stage1", "loss_stage2", "recall1", "recall5", "mean1", "worst1", "mean5", "worst5", "pair_sim"):
        assert key in rec
    assert [json.loads(l)["round"] for l in lines] == [1, 2]
    assert json.loads((first / "config.json").read_text())["seed"] == 3


def test_env_var_sets_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDALIGN_OUT_DIR", str(tmp_path / "env"))
    assert dispatch(["train", "--rounds", "0"]) == 0
    assert (tmp_path / "env" / "metrics.jsonl").exists()


def test_config_file_with_flag_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"strategy": "fedavg", "rounds": 5}))
    out = tmp_path / "run"
    assert dispatch(["train", "--config", str(path), "--rounds", "0", "--out_dir", str(out)]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["strategy"] == "fedavg" and cfg["rounds"] == 0


def test_full_workflow(tmp_path, capsys):
    runs = tmp_path / "runs"
    for strategy in ("fedavg", "decentralized"):
        out = runs / strategy
        args = ["--strategy", strategy, "--out_dir", str(out)] + SMALL
        assert dispatch(["train", "--quiet"] + args) == 0
        assert dispatch(["evaluate"] + args) == 0
        report = json.loads((out / "eval_report.json").read_text())
        last = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
        assert report["mean"]["1"] == pytest.approx(last["mean1"], abs=1e-12)
    assert (runs / "decentralized" / "local_model_2.bin").exists()
    fedavg = ["--strategy", "fedavg", "--out_dir", str(runs / "fedavg")] + SMALL
    assert dispatch(["probe-distortion", "--steps", "2"] + fedavg) == 0
    table = json.loads((runs / "fedavg" / "distortion.json").read_text())
    assert len(table["drops"]) == 3
    assert dispatch(["partition"] + fedavg) == 0
    hist = json.loads((runs / "fedavg" / "clients" / "class_histograms.json").read_text())
    assert sum(sum(h) for h in hist.values()) == 4 * 60
    summary = tmp_path / "summary.csv"
    assert dispatch(["report", str(runs), "-o", str(summary)]) == 0
    rows = list(csv.DictReader(summary.open()))
    assert [r["strategy"] for r in rows] == ["decentralized", "fedavg"]
    assert float(rows[1]["mean1"]) == pytest.approx(last_mean(runs / "fedavg"))


def last_mean(run):
    return json.loads((run / "metrics.jsonl").read_text().splitlines()[-1])["mean1"]
