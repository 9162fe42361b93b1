"""Output files for case runs: metrics, confusion tables, traces, run summaries."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .experiment import CaseSetup, ExperimentResult, RunSummary, aggregate, provenance, summarize_run
from .fdi import HealthClass
from .plant import Batch

LABELS = [HealthClass(i).label for i in range(4)]


def dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------ summaries

def summary_to_dict(s: RunSummary) -> dict:
    return {
        "run_index": s.run_index, "health_class": s.health_class, "failed": s.failed,
        "count": s.count,
        "sse": {k: [float(x) for x in v] for k, v in s.sse.items()},
        "window_mean": {k: [float(x) for x in v] for k, v in s.window_mean.items()},
    }


def summary_from_dict(d: dict) -> RunSummary:
    return RunSummary(
        int(d["run_index"]), int(d["health_class"]), d.get("failed"),
        {k: np.array(v, dtype=float) for k, v in d.get("sse", {}).items()},
        int(d.get("count", 0)),
        {k: np.array(v, dtype=float) for k, v in d.get("window_mean", {}).items()},
    )


# ------------------------------------------------------------ traces

def trace_header(setup: CaseSetup, kinds: Iterable[str]) -> list[str]:
    names = setup.variable_names()
    est = setup.est_model
    cols = ["step"] + [f"truth_{n}" for n in names] + [f"y_{n}" for n in est.output_names()]
    cols += [f"u_{n}" for n in est.input_names()] + ["pe_true", "pe_reported"]
    for k in kinds:
        cols += [f"{k}_mean_{n}" for n in names] + [f"{k}_var_{n}" for n in names]
    return cols


def trace_rows(setup: CaseSetup, batch: Batch, r: int, truth: np.ndarray, means: dict) -> np.ndarray:
    """Table of one run's trace, one row per step ``0..T`` (deviation coordinates)."""
    T = truth.shape[1] - 1
    parts = [np.arange(T + 1)[:, None], truth[r], batch.y[r], batch.u[r],
             batch.pe_true[r][:, None], batch.pe_reported[r][:, None]]
    for k, m in means.items():
        sched = setup.schedules[k]
        var = np.concatenate([np.diag(sched.init_cov)[None], np.diagonal(sched.post_covs, axis1=1, axis2=2)])
        parts += [m[r], var]
    return np.hstack(parts)


def write_trace(path: Path, header: list[str], rows: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([str(int(row[0]))] + [repr(float(v)) for v in row[1:]])


def read_trace(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    return {name: data[:, i] for i, name in enumerate(header)}


def write_traces(out: Path, result: ExperimentResult) -> int:
    """Write one CSV per retained run plus ``index.json``; returns the file count."""
    setup = result.setup
    kinds = list(setup.estimators)
    header = trace_header(setup, kinds)
    tdir = out / "traces"
    tdir.mkdir(parents=True, exist_ok=True)
    index = []
    for batch, truth, means in result.retained or []:
        for r in range(len(batch)):
            idx = int(batch.run_index[r])
            entry = {"run_index": idx, "health_class": int(batch.classes[r]), "failed": batch.failed[r]}
            if batch.failed[r] is None:
                name = f"run_{idx:05d}.csv"
                write_trace(tdir / name, header, trace_rows(setup, batch, r, truth, means))
                entry["file"] = name
            index.append(entry)
    index.sort(key=lambda e: e["run_index"])
    dump_json(tdir / "index.json", {"estimators": kinds, "variables": setup.variable_names(),
                                    "runs": index})
    return sum(1 for e in index if "file" in e)


def summaries_from_traces(out: Path, setup: CaseSetup) -> list[RunSummary]:
    tdir = out / "traces"
    index = json.loads((tdir / "index.json").read_text(encoding="utf-8"))
    names = index["variables"]
    sc = setup.scenario
    summaries = []
    for e in index["runs"]:
        if e.get("failed"):
            summaries.append(RunSummary(e["run_index"], e["health_class"], e["failed"]))
            continue
        cols = read_trace(tdir / e["file"])
        truth = np.column_stack([cols[f"truth_{n}"] for n in names])
        means = {k: np.column_stack([cols[f"{k}_mean_{n}"] for n in names]) for k in index["estimators"]}
        summaries.append(summarize_run(e["run_index"], e["health_class"], truth, means, sc.rmse_start,
                                       sc.window, setup.est_model.n_x, setup.est_model.ss.theta))
    return summaries


# ------------------------------------------------------------ tables

def confusion_csv(path: Path, counts) -> None:
    counts = np.asarray(counts)
    rows = counts.sum(axis=1, keepdims=True)
    rates = np.where(rows > 0, counts / np.maximum(rows, 1), 0.0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["actual \\ estimated"] + LABELS + ["runs"])
        for i, label in enumerate(LABELS):
            w.writerow([label] + [f"{v:.4f}" for v in rates[i]] + [int(rows[i, 0])])


def format_tables(metrics: dict) -> str:
    kinds = list(metrics["rmse"])
    lines = [f"Case: {metrics.get('case_id', '?')}", "", "Estimation accuracy (RMSE, deviation units)"]
    head = f"{'variable':<10}" + "".join(f"{k.upper():>14}" for k in kinds) + f"{'PES vs PENS':>14}"
    lines += [head, "-" * len(head)]
    for v in metrics["variables"]:
        row = f"{v:<10}" + "".join(f"{metrics['rmse'][k][v]:>14.5g}" for k in kinds)
        imp = metrics["improvement_pct"].get(v)
        row += f"{imp:>13.2f}%" if imp is not None else ""
        lines.append(row)
    lines += ["", "FDI performance (pooled over health parameters)"]
    head = f"{'estimator':<10}{'precision':>11}{'recall':>11}{'F1':>11}{'accuracy':>11}{'severe TPR':>12}"
    lines += [head, "-" * len(head)]
    for k in kinds:
        f = metrics["fdi"][k]
        lines.append(f"{k.upper():<10}{f['precision']:>11.4f}{f['recall']:>11.4f}{f['f1']:>11.4f}"
                     f"{f['accuracy']:>11.4f}{f['severe_tpr']:>12.4f}")
    short = ["H", "Mi", "Me", "S"]
    for param, per in metrics["confusion_rates"].items():
        for k, rates in per.items():
            lines += ["", f"Confusion {param} / {k.upper()} (rows actual, columns estimated)"]
            lines.append("      " + "".join(f"{s:>8}" for s in short))
            for s, row in zip(short, rates):
                lines.append(f"{s:<6}" + "".join(f"{x:>8.3f}" for x in row))
    runs = metrics["runs"]
    lines += ["", f"Runs: {runs['total']} total, {runs['failed']} failed"]
    return "\n".join(lines) + "\n"


def write_case_outputs(out: Path, result: ExperimentResult) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    doc = result.metrics_document()
    dump_json(out / "metrics.json", doc)
    for param, per in doc["confusion_counts"].items():
        for k, counts in per.items():
            confusion_csv(out / f"confusion_{param}_{k}.csv", counts)
    (out / "tables.txt").write_text(format_tables(doc), encoding="utf-8")
    dump_json(out / "runs.json", {"scenario": result.scenario.to_dict(),
                                  "base_dir": result.scenario.base_dir,
                                  "runs": [summary_to_dict(s) for s in sorted(result.summaries,
                                                                              key=lambda s: s.run_index)]})
    if result.retained:
        write_traces(out, result)
    return doc


def reaggregate(out: Path, setup: CaseSetup, source: str = "auto") -> dict:
    """Rebuild metrics from retained traces (if present) or run summaries."""
    use_traces = source == "traces" or (source == "auto" and (out / "traces" / "index.json").exists())
    if use_traces:
        summaries = summaries_from_traces(out, setup)
    else:
        data = json.loads((out / "runs.json").read_text(encoding="utf-8"))
        summaries = [summary_from_dict(d) for d in data["runs"]]
    metrics, _ = aggregate(summaries, setup.variable_names(), setup.est_model.n_x, list(setup.estimators))
    return {"case_id": setup.scenario.case_id, "provenance": provenance(setup.scenario), **metrics}
