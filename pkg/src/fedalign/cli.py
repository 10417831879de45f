"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from . import bounds_checks
from .config import ConfigError, ExperimentConfig, parse_config
from .evaluation import distortion_probe, per_client_report
from .federation import Strategy, build_datasets, initial_state, iter_rounds
from .snapshot import load_model, save_model
from .synthetic_data import export_csv

OUT_DIR_ENV = "FEDALIGN_OUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for runtime errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_float(text: str) -> float:
    return float(text)  # accepts "inf" for rho


def _parse_k_list(text: str) -> list[int]:
    return [int(k) for k in text.replace(",", " ").split()]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    for f in fields(ExperimentConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        kind = {"int": int, "float": _parse_float, "str": str}.get(f.type, _parse_k_list)
        p.add_argument(*names, dest=f.name, type=kind, default=argparse.SUPPRESS, metavar=f.name.upper())


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig) if hasattr(args, f.name)}
    base = parse_config(args.config)
    env_dir = os.environ.get(OUT_DIR_ENV)
    if env_dir and "out_dir" not in overrides:
        overrides["out_dir"] = env_dir
    return base.replace(**overrides) if overrides else base


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _records_line(record: dict) -> str:
    return json.dumps(record, allow_nan=False) + "\n"


def cmd_partition(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out_dir) / "clients"
    out.mkdir(parents=True, exist_ok=True)
    datasets = build_datasets(cfg)
    hist = {}
    for d in datasets:
        export_csv(d, out / f"client_{d.client_id}.csv")
        hist[str(d.client_id)] = d.class_histogram.tolist()
    _write_json(out / "class_histograms.json", hist)
    print(f"wrote {len(datasets)} client files to {out}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    digest = cfg.config_hash()
    server, clients = initial_state(cfg)
    with (out / "metrics.jsonl").open("w") as metrics, (out / "timings.jsonl").open("w") as timings:
        start = time.perf_counter()
        for m in iter_rounds(cfg, server, clients, args.threads):
            now = time.perf_counter()
            metrics.write(_records_line({**m.to_record(), "config_hash": digest}))
            metrics.flush()
            timings.write(_records_line({"round": m.round, "seconds": round(now - start, 6)}))
            start = now
            if not args.quiet:
                print(f"round {m.round}: " + " ".join(f"mean{k}={m.mean[k]:.4f} worst{k}={m.worst[k]:.4f}" for k in sorted(m.mean)))
    save_model(server.global_model, out / "final_model.bin")
    if Strategy(cfg.strategy) is Strategy.DECENTRALIZED:
        for c in clients:
            if c.local_model is not None:
                save_model(c.local_model, out / f"local_model_{c.client_id}.bin")
    return EXIT_OK


def _models_from(cfg: ExperimentConfig, paths: Optional[Sequence[str]]):
    out = Path(cfg.out_dir)
    if paths:
        models = [load_model(p) for p in paths]
    else:
        local = sorted(out.glob("local_model_*.bin"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
        if Strategy(cfg.strategy) is Strategy.DECENTRALIZED and local:
            models = [load_model(p) for p in local]
        else:
            models = [load_model(out / "final_model.bin")]
    if any(m.dims.to_dict() != cfg.model_dims for m in models):
        raise ConfigError("model snapshot dimensions do not match the config")
    return models


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    models = _models_from(cfg, args.model)
    datasets = build_datasets(cfg)
    report = per_client_report(models if len(models) > 1 else models[0], datasets, cfg.eval_k_list, cfg.eval_pool_size, cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_report.json", report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_probe(cfg: ExperimentConfig, args) -> int:
    models = _models_from(cfg, args.model)
    if len(models) != 1:
        raise ConfigError("the distortion probe needs exactly one aggregated model")
    steps = cfg.local_steps if args.steps is None else args.steps
    table = distortion_probe(models[0], build_datasets(cfg), steps, cfg.lr, cfg.tau, cfg.batch_size, cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "distortion.json", table.to_dict())
    print(json.dumps({"mean_drop": table.mean_drop, "avg": table.avg_row.tolist()}))
    return EXIT_OK


def cmd_check_bounds(cfg: ExperimentConfig, args) -> int:
    report = bounds_checks.run_all(cfg.seed, args.instances)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "bounds_report.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK if report["ok"] else EXIT_RUNTIME


REPORT_COLUMNS = ("strategy", "seed", "rounds", "mean1", "worst1", "mean5", "worst5", "mean_pair_sim", "config_hash", "run_dir")


def _summarise_run(run: Path) -> dict:
    cfg = json.loads((run / "config.json").read_text())
    lines = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines() if line.strip()]
    row = {"strategy": cfg["strategy"], "seed": cfg["seed"], "rounds": len(lines), "run_dir": str(run)}
    row["config_hash"] = lines[-1]["config_hash"] if lines else ""
    last = lines[-1] if lines else {}
    for key in ("mean1", "worst1", "mean5", "worst5"):
        row[key] = last.get(key, "")
    sims = last.get("pair_sim") or []
    row["mean_pair_sim"] = sum(sims) / len(sims) if sims else ""
    return row


def cmd_report(args) -> int:
    runs = []
    for root in args.runs:
        root = Path(root)
        found = [root] if (root / "metrics.jsonl").exists() else sorted(p.parent for p in root.glob("*/metrics.jsonl"))
        if not found:
            raise FileNotFoundError(f"no run directories under {root}")
        runs.extend(found)
    rows = sorted((_summarise_run(r) for r in runs), key=lambda r: (r["strategy"], r["seed"], r["run_dir"]))
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedalign", description="Federated two-tower alignment simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        return p

    with_config("partition", "write client CSVs and class histograms")
    p = with_config("train", "run one experiment and stream metrics")
    p.add_argument("--threads", type=int, default=1, help="client-parallel worker threads")
    p.add_argument("--quiet", action="store_true")
    p = with_config("evaluate", "score a saved model on the client test splits")
    p.add_argument("--model", nargs="+", help="snapshot path(s); default: the run directory's models")
    p = with_config("probe-distortion", "retrain per client and report the pair-similarity drop")
    p.add_argument("--model", nargs=1, help="snapshot path; default: final_model.bin in out_dir")
    p.add_argument("--steps", type=int, default=None, help="retraining steps (default: local_steps)")
    p = with_config("check-bounds", "run the numerical bound sweeps")
    p.add_argument("--instances", type=int, default=1000)
    p = sub.add_parser("report", help="summarise run directories into a CSV")
    p.add_argument("runs", nargs="+", help="run directories or parents of run directories")
    p.add_argument("--output", "-o", help="CSV path (default: stdout)")
    return parser


COMMANDS = {
    "partition": cmd_partition,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "probe-distortion": cmd_probe,
    "check-bounds": cmd_check_bounds,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "report":
            return cmd_report(args)
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
