"""Command-line entry point: ``auxfl partition|train|report``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import report as rep
from .config import build_experiment, emit_config, load_config, make_partition, load_dataset, override
from .data import PartitionPlan
from .errors import AuxFLError, ConfigError, DataError
from .nn import save_params
from .sim import run_experiment

log = logging.getLogger("auxfl")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _resolve(args):
    config = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    if getattr(args, "baselines", None):
        changes["baselines"] = [b.strip() for b in args.baselines.split(",") if b.strip()]
    return override(config, **changes) if changes else config


def cmd_partition(args) -> int:
    config = _resolve(args)
    split = load_dataset(config)
    plan = make_partition(config, split.train)
    out = Path(config.output_dir)
    _write(out / "partition.json", plan.to_json())
    labels = split.train.labels[config.main_task]
    n_classes = next(t.num_classes for t in config.tasks if t.id == config.main_task)
    print(f"partition mode={plan.mode} stations={plan.n_stations} seed={plan.seed} -> {out / 'partition.json'}")
    for u, shard in enumerate(plan.shards):
        hist = np.bincount(labels[shard], minlength=n_classes)
        print(f"station {u}: {len(shard):6d} samples  classes {' '.join(str(int(h)) for h in hist)}")
    return 0


def _train_one(config, plan_json, name):
    plan = PartitionPlan.from_json(plan_json)
    exp = build_experiment(config, plan)
    result = run_experiment(exp, name)
    out = Path(config.output_dir) / rep.baseline_dir(name)
    _write(out / "metrics.csv", rep.metrics_csv(result))
    _write(out / "ledger.json", result.ledger.to_json())
    _write(out / "ledger_rounds.csv", result.ledger.rounds_csv())
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "params.bin", result.params)
    return name, result.n_params, len(result.metrics)


def cmd_train(args) -> int:
    config = _resolve(args)
    out = Path(config.output_dir)
    if args.manifest:
        try:
            plan = PartitionPlan.from_json(Path(args.manifest).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read manifest {args.manifest}: {exc.strerror}") from None
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"malformed manifest {args.manifest}: {exc}") from None
    else:
        plan = make_partition(config, load_dataset(config).train)
    _write(out / "config.json", emit_config(config))
    _write(out / "partition.json", plan.to_json())
    _write(
        out / "run.json",
        json.dumps({"baselines": config.baselines, "tasks": [t.id for t in config.tasks]}, indent=2) + "\n",
    )
    plan_json = plan.to_json()
    if args.parallel and len(config.baselines) > 1:
        with ProcessPoolExecutor(max_workers=min(len(config.baselines), os.cpu_count() or 1)) as pool:
            futures = [pool.submit(_train_one, config, plan_json, b) for b in config.baselines]
            done = [f.result() for f in futures]
    else:
        done = []
        for b in config.baselines:
            log.info("training %s", b)
            done.append(_train_one(config, plan_json, b))
    for name, n_params, rounds in done:
        print(f"{name}: {rounds} rounds, {n_params} parameters -> {out / rep.baseline_dir(name)}")
    return 0


def _parse_kappa(text):
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        tid, sep, value = item.partition("=")
        try:
            out[tid.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"bad --kappa entry {item!r}; expected task=value") from None
        if not sep or not 0 < out[tid.strip()] < 1:
            raise ConfigError(f"bad --kappa entry {item!r}; expected task=value with value in (0, 1)")
    return out


def cmd_report(args) -> int:
    run_dir = Path(args.out if args.out else load_config(args.config).output_dir if args.config else ".")
    run = rep.read_run(run_dir)
    if args.kappa:
        kappa = _parse_kappa(args.kappa)
    else:
        try:
            kappa = json.loads((run_dir / "config.json").read_text(encoding="utf-8")).get("targets", {})
        except OSError:
            kappa = {}
    report = rep.build_report(run, kappa)
    text = rep.report_text(report)
    _write(run_dir / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write(run_dir / "report.txt", text)
    for name, table in rep.plot_tables(run).items():
        _write(run_dir / "plots" / name, table)
    print(text, end="")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="auxfl", description="Federated auxiliary multi-task learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config JSON")
        p.add_argument("--out", help="output directory (overrides config output_dir)")
        p.add_argument("--seed", type=int, help="seed override")

    p = sub.add_parser("partition", help="split the data and write the partition manifest")
    common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="run the selected baselines")
    common(p)
    p.add_argument("--baselines", help="comma-separated baseline list")
    p.add_argument("--manifest", help="partition manifest to replay")
    p.add_argument("--parallel", action="store_true", help="run baselines in worker processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="summarize a run directory")
    common(p, config_required=False)
    p.add_argument("--kappa", help="targets as task=value,... (defaults to the run's config targets)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except AuxFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
