"""Run artifacts (metrics CSV, ledger JSON) and the comparison report built from them."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .costs import CostLedger, first_crossing
from .errors import DataError

METRIC_COLUMNS = [
    "round",
    "task_id",
    "split",
    "accuracy",
    "loss",
    "total_global_loss",
    "comm_bytes_cum",
    "energy_j_cum",
    "modeled_s_cum",
    "wall_ms",
]

SPLITS = ("validation", "test")


def _cell(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else v


def metrics_csv(result) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for m in result.metrics:
        for tid in result.task_ids:
            for split in SPLITS:
                if (tid, split) not in m.tasks:
                    continue
                acc, loss = m.tasks[(tid, split)]
                writer.writerow(
                    [_cell(v) for v in (
                        m.round, tid, split, acc, loss, m.total_global_loss,
                        m.comm_bytes_cum, m.energy_j_cum, m.modeled_s_cum, m.wall_ms,
                    )]
                )
    return buf.getvalue()


def baseline_dir(name: str) -> str:
    return name.replace(":", "_")


def read_metrics(path) -> list:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise DataError(f"{path}: no metric rows")
    return rows


def read_run(run_dir) -> dict:
    """Load every baseline's metrics and ledger listed in ``run.json``."""
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    except OSError:
        raise DataError(f"{run_dir}: no run.json; run `train` first") from None
    runs = {}
    for name in manifest["baselines"]:
        sub = run_dir / baseline_dir(name)
        try:
            ledger = CostLedger.from_dict(json.loads((sub / "ledger.json").read_text(encoding="utf-8")))
        except OSError:
            raise DataError(f"{sub}: missing ledger.json") from None
        runs[name] = (read_metrics(sub / "metrics.csv"), ledger)
    return {"baselines": manifest["baselines"], "tasks": manifest["tasks"], "runs": runs}


def series(rows, task_id, split="test", field="accuracy"):
    out = {}
    for r in rows:
        if r["task_id"] == task_id and r["split"] == split:
            out[int(r["round"])] = float(r[field])
    return [out[k] for k in sorted(out)]


def global_loss_series(rows):
    out = {}
    for r in rows:
        out[int(r["round"])] = float(r["total_global_loss"])
    return [out[k] for k in sorted(out)]


def summarize(rows, ledger: CostLedger, kappa: dict) -> dict:
    """Per-task rounds/communication/energy/time to reach ``kappa`` plus final values."""
    tasks = sorted({r["task_id"] for r in rows}, key=[r["task_id"] for r in rows].index)
    cum = list(ledger.cumulative())
    per_task = {}
    for tid in tasks:
        acc = series(rows, tid)
        entry = {"final_test_accuracy": acc[-1] if acc else None}
        if tid in kappa:
            k = kappa[tid]
            hit = first_crossing(acc, k)
            entry["kappa"] = k
            entry["rounds_to_kappa"] = hit
            if hit is None:
                entry.update(comm_mb_to_kappa=None, energy_j_to_kappa=None, modeled_s_to_kappa=None)
            else:
                _, comm, energy, modeled, _ = cum[hit - 1]
                entry.update(
                    comm_mb_to_kappa=comm / ledger.mb_definition,
                    energy_j_to_kappa=energy,
                    modeled_s_to_kappa=modeled,
                )
        per_task[tid] = entry
    losses = global_loss_series(rows)
    return {
        "tasks": per_task,
        "final_total_global_loss": losses[-1],
        "total_comm_mb": ledger.comm_bytes / ledger.mb_definition,
        "total_energy_j": ledger.energy_j,
        "total_modeled_s": ledger.modeled_s,
        "rounds": len(losses),
    }


def build_report(run: dict, kappa: dict) -> dict:
    return {
        "kappa": dict(sorted(kappa.items())),
        "baselines": {name: summarize(rows, ledger, kappa) for name, (rows, ledger) in run["runs"].items()},
    }


def _fmt(v, spec):
    return "not reached" if v is None else format(v, spec)


def report_text(report: dict) -> str:
    lines = []
    header = f"{'baseline':<24}{'task':<12}{'kappa':>7}{'rounds':>13}{'comm MB':>13}{'energy J':>13}{'final acc':>11}"
    lines.append(header)
    lines.append("-" * len(header))
    for name, summary in report["baselines"].items():
        for tid, e in summary["tasks"].items():
            if "kappa" not in e:
                continue
            lines.append(
                f"{name:<24}{tid:<12}{e['kappa']:>7.3f}"
                f"{_fmt(e['rounds_to_kappa'], 'd'):>13}"
                f"{_fmt(e['comm_mb_to_kappa'], '.3f'):>13}"
                f"{_fmt(e['energy_j_to_kappa'], '.4f'):>13}"
                f"{e['final_test_accuracy']:>11.4f}"
            )
    lines.append("")
    lines.append(f"{'baseline':<24}{'global loss':>13}{'comm MB':>13}{'energy J':>13}{'modeled s':>13}")
    for name, s in report["baselines"].items():
        lines.append(
            f"{name:<24}{s['final_total_global_loss']:>13.5f}{s['total_comm_mb']:>13.3f}"
            f"{s['total_energy_j']:>13.4f}{s['total_modeled_s']:>13.4f}"
        )
    return "\n".join(lines) + "\n"


def plot_tables(run: dict) -> dict:
    """CSV text per file name: accuracy curves per task/split and the global-loss curve."""
    names = run["baselines"]
    out = {}
    for tid in run["tasks"]:
        for split in SPLITS:
            cols = {n: series(run["runs"][n][0], tid, split) for n in names}
            cols = {n: c for n, c in cols.items() if c}
            if cols:
                out[f"accuracy_{tid}_{split}.csv"] = _table(cols)
    out["total_global_loss.csv"] = _table({n: global_loss_series(run["runs"][n][0]) for n in names})
    return out


def _table(cols: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round"] + list(cols))
    length = max(len(c) for c in cols.values())
    for i in range(length):
        writer.writerow([i + 1] + [repr(c[i]) if i < len(c) else "" for c in cols.values()])
    return buf.getvalue()
