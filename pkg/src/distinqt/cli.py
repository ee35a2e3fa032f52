"""Command line: gen-data, train, eval, attack, report.

Exit codes: 0 ok, 1 user error, 2 internal error. Failures print one JSON
line ``{"error": ..., "message": ..., "exit_code": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config, parse_config, with_overrides
from .data import (
    DataError, PreparedData, Scaling, ScenarioConfig, generate_scenario, load_scenario,
    prepare_training_data, save_scenario,
)
from .evaluation import evaluate_run, write_horizon_csv, write_summary_csv
from .model import CheckpointError, build_encoder, load_checkpoint, save_checkpoint
from .privacy import AttackConfig, attack_report, attack_window
from .protocol import ProtocolError, WorkerActor, run_training, serve_worker
from .topology import TopologyError
from .transport import RemoteLink, parse_address, worker_endpoint

LOG_ENV = "DISTINQT_LOG_LEVEL"
CHECKPOINT_FILE = "checkpoint.bin"
CONFIG_FILE = "config.yaml"
LOG_FILE = "train_log.jsonl"
HISTORY_FILE = "history.json"
EVAL_FILE = "eval.json"

log = logging.getLogger("distinqt")


class UsageError(Exception):
    pass


USER_ERRORS = (UsageError, ConfigError, DataError, TopologyError, CheckpointError, OSError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _worker_key(text: str) -> Tuple[int, int]:
    try:
        net, worker = text.split(":")
        return int(net), int(worker)
    except ValueError:
        raise UsageError(f"worker must look like NET:K, got {text!r}") from None


def _address(text: str) -> Tuple[str, int]:
    try:
        return parse_address(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- shared steps

def _config(path: Optional[str]) -> RunConfig:
    return load_config(path) if path else parse_config({})


def _scenario(cfg: RunConfig, data_dir: Optional[str]):
    root = data_dir or cfg.data.scenario
    if root:
        scenario, _ = load_scenario(Path(root))
        return scenario
    return generate_scenario(ScenarioConfig(duration_s=cfg.data.duration_s, n_tod_ues=cfg.n_ues,
                                            seed=cfg.data.seed))


def _prepare(cfg: RunConfig, data_dir: Optional[str]) -> PreparedData:
    return prepare_training_data(_scenario(cfg, data_dir), cfg.topology, cfg.training.val_fraction,
                                 cfg.training.normalize)


def _load_run(run: Path) -> Tuple[RunConfig, Dict[str, np.ndarray], dict]:
    if not (run / CHECKPOINT_FILE).exists():
        raise UsageError(f"{run} has no {CHECKPOINT_FILE}; run train first")
    cfg = load_config(run / CONFIG_FILE)
    tensors, meta = load_checkpoint(run / CHECKPOINT_FILE)
    return cfg, tensors, meta


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    scfg = ScenarioConfig(duration_s=args.duration or cfg.data.duration_s,
                          n_tod_ues=args.n_ues or cfg.n_ues,
                          seed=cfg.data.seed if args.seed is None else args.seed)
    out = Path(args.out)
    manifest = save_scenario(out, generate_scenario(scfg), scfg, csv_export=args.csv)
    _emit({"scenario": str(out), "manifest": str(manifest), "samples": scfg.n_samples})
    return 0


def _train_worker(args, cfg: RunConfig) -> int:
    if not args.worker:
        raise UsageError("--connect needs --worker NET:K")
    key = _worker_key(args.worker)
    if key not in cfg.topology.worker_keys():
        raise UsageError(f"worker {args.worker} is not in the topology")
    prep = _prepare(cfg, args.data)
    enc = build_encoder(cfg.model.encoder_spec(cfg.topology, key[0]), cfg.training.seed, key[0])
    actor = WorkerActor(*key, enc, cfg.model.lr, {"train": prep.train.inputs[key], "val": prep.val.inputs[key]})
    serve_worker(RemoteLink(_address(args.connect), worker_endpoint(*key)), actor)
    _emit({"worker": args.worker, "status": "stopped"})
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    cfg = with_overrides(cfg, "training", seed=args.seed, max_epochs=args.max_epochs, patience=args.patience,
                         mode=args.mode if args.mode in ("deterministic", "threaded") else None)
    if args.mode in ("stream", "hub"):
        cfg = with_overrides(cfg, "transport", kind=args.mode)
    if args.listen or args.remote:
        cfg = with_overrides(cfg, "transport", kind="hub", listen=args.listen,
                             remote=[list(_worker_key(r)) for r in args.remote] or None)
    if args.connect:
        return _train_worker(args, cfg)
    if not args.out:
        raise UsageError("train needs --out RUN_DIR")
    if args.centralized and any(cfg.topology.k(e) != 1 for e in cfg.topology.net_ids):
        raise UsageError("--centralized needs exactly one worker per NET (set topology.n_ues: 1)")
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    prep = _prepare(cfg, args.data)
    kw = {}
    if not args.centralized:
        kw["barrier_timeout"] = cfg.transport.barrier_timeout_s
        if cfg.transport.kind == "hub":
            kw["hub_address"] = _address(cfg.transport.listen)
            kw["remote"] = list(cfg.transport.remote)
            kw["on_listen"] = lambda addr: print(json.dumps({"listening": f"{addr[0]}:{addr[1]}"}), flush=True)
    tensors, result = run_training(
        cfg.topology, cfg.model, prep.train, prep.val, seed=cfg.training.seed, centralized=args.centralized,
        mode=cfg.scheduler_mode, max_epochs=cfg.training.max_epochs, patience=cfg.training.patience,
        log_path=run / LOG_FILE, **kw)
    dump_config(cfg, run / CONFIG_FILE)
    best = result.best_val_mse if np.isfinite(result.best_val_mse) else None  # None when no epoch ran
    meta = {"scaling": prep.scaling.to_dict(), "seed": cfg.training.seed, "centralized": args.centralized,
            "best_epoch": result.early_stop.best_epoch, "best_val_mse": best}
    digest = save_checkpoint(run / CHECKPOINT_FILE, tensors, meta)
    history = {"initial_val_mse": result.initial_val_mse, "val_mse": result.val_mse,
               "early_stop": result.early_stop.to_dict(), "seconds": result.seconds,
               "n_train": len(prep.train), "n_val": len(prep.val)}
    (run / HISTORY_FILE).write_text(json.dumps(history, indent=2))
    _emit({"run": str(run), "checkpoint_sha256": digest, "epochs": len(result.val_mse),
           "initial_val_mse": result.initial_val_mse, "best_val_mse": best})
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg, tensors, meta = _load_run(run)
    seeds = args.seeds or list(cfg.data.eval_seeds)
    res = evaluate_run(cfg, tensors, Scaling.from_dict(meta["scaling"]), seeds,
                       args.duration or cfg.data.eval_duration_s, name=run.name)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    step = cfg.topology.timing.prediction_step_ms
    write_horizon_csv(out / "per_horizon.csv", res["model"], step)
    write_horizon_csv(out / "persistence_per_horizon.csv", res["persistence"], step)
    doc = {"model": res["model"].to_dict(), "persistence": res["persistence"].to_dict(),
           "improvement": res["improvement"], "seeds": [int(s) for s in seeds]}
    (out / EVAL_FILE).write_text(json.dumps(doc, indent=2))
    _emit({"overall_mae": res["model"].overall_mae, "last_step_mae": res["model"].last_step_mae,
           "persistence_overall_mae": res["persistence"].overall_mae, "improvement": res["improvement"]})
    return 0


def cmd_attack(args) -> int:
    run = Path(args.run)
    cfg, tensors, meta = _load_run(run)
    try:
        net = cfg.topology.net_by_name(args.net)
    except KeyError:
        raise UsageError(f"unknown NET {args.net!r}") from None
    enc = build_encoder(cfg.model.encoder_spec(cfg.topology, net.net_id), 0, net.net_id)
    prefix = f"enc{net.net_id}."
    enc.set_weights({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    prep = _prepare(cfg, args.data)
    worker = args.worker or cfg.topology.workers_of(net.net_id)[0].worker_id
    windows = prep.val.inputs[(net.net_id, worker)]
    picks = np.random.default_rng(args.seed).choice(len(windows), size=min(args.windows, len(windows)),
                                                    replace=False)
    results = [attack_window(enc, windows[i], AttackConfig(target=(net.net_id, worker), lr=args.lr,
                                                           max_iter=args.iters, seed=args.seed + j))
               for j, i in enumerate(picks)]
    report = attack_report(net.name, net.features, results)
    report["worker"] = worker
    report["windows"] = [int(i) for i in picks]
    out = Path(args.out) if args.out else run / f"attack_{net.name}.json"
    out.write_text(json.dumps(report, indent=2))
    _emit({"report": str(out), "similarity_mean": report["similarity_mean"], "d": report["d"]})
    return 0


def cmd_report(args) -> int:
    named = {}
    for r in args.runs:
        path = Path(r) / EVAL_FILE
        if not path.exists():
            raise UsageError(f"{path} not found; run eval first")
        doc = json.loads(path.read_text())
        for kind in ("model", "persistence"):
            d = doc[kind]
            named[f"{Path(r).name}/{kind}"] = d
    rows = [{"name": n, **{k: d[k] for k in ("overall_mae", "overall_std", "last_step_mae", "last_step_std",
                                              "n_windows")}} for n, d in named.items()]
    if args.out:
        write_summary_csv(Path(args.out), rows)
    else:
        import csv
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return 0


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="distinqt", description="Distributed privacy-aware QoS prediction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic scenario directory")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--duration", type=float, help="seconds")
    g.add_argument("--n-ues", type=int)
    g.add_argument("--csv", action="store_true", help="also write CSV copies")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train distributed (default) or centralized")
    t.add_argument("--config")
    t.add_argument("--data", help="scenario directory (default: generate from config)")
    t.add_argument("--out", help="run directory")
    t.add_argument("--centralized", action="store_true")
    t.add_argument("--mode", choices=("deterministic", "threaded", "stream", "hub"))
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--listen", help="hub address host:port for remote workers")
    t.add_argument("--remote", action="append", default=[], metavar="NET:K",
                   help="worker served by another process (repeatable)")
    t.add_argument("--connect", help="run one worker against a hub at host:port")
    t.add_argument("--worker", metavar="NET:K", help="worker to serve with --connect")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="MAE report on fresh-seed scenarios")
    e.add_argument("--run", required=True)
    e.add_argument("--out")
    e.add_argument("--seeds", type=int, nargs="+")
    e.add_argument("--duration", type=float)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attack", help="input reconstruction against a trained encoder")
    a.add_argument("--run", required=True)
    a.add_argument("--data")
    a.add_argument("--net", default="tod_ue")
    a.add_argument("--worker", type=int)
    a.add_argument("--windows", type=int, default=3)
    a.add_argument("--iters", type=int, default=20_000)
    a.add_argument("--lr", type=float, default=3e-4)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="CSV summary across evaluated runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except USER_ERRORS as exc:
        return _fail(exc, 1)
    except ProtocolError as exc:
        log.debug("%s", traceback.format_exc())
        return _fail(exc, 2)
    except Exception as exc:  # noqa: BLE001 - last-resort guard for the exit-code contract
        log.error("%s", traceback.format_exc())
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
