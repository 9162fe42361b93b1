"""Command-line entry point: ``apu-fdi <command> [options]``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or model error,
3 too many failed runs. Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ScenarioConfig, builtin_case, load_config
from .experiment import KIND_ORDER, RunBudgetExceeded, prepare, run_case, with_overrides
from .fdi import HealthClass
from .model import ModelError, load_model, structural_report
from .reporting import dump_json, format_tables, reaggregate, trace_header, trace_rows, write_case_outputs, write_trace
from .theorems import HypothesisError, run_theorem_suite


def _scenario(args) -> ScenarioConfig:
    src = args.config or "case1"
    scenario = builtin_case(src) if src in ("case1", "case2", "case3") and not Path(src).exists() \
        else load_config(src)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "estimators", None):
        kinds = [k.strip().lower() for k in args.estimators.split(",") if k.strip()]
        changes["estimators"] = [k for k in KIND_ORDER if k in kinds] + [k for k in kinds if k not in KIND_ORDER]
    if getattr(args, "runs_per_class", None) is not None:
        changes["runs_per_class"] = args.runs_per_class
    return with_overrides(scenario, **changes).validate()


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------ commands

def cmd_simulate(args) -> int:
    scenario = with_overrides(_scenario(args), runs_per_class=1)
    cls = HealthClass[args.health_class.upper()]
    from .experiment import filter_batch, truth_augmented
    from .plant import simulate_batch

    setup = prepare(scenario)
    idx = args.run_index
    batch = simulate_batch(scenario, [idx], [cls], setup.truth_model)
    if batch.failed[0]:
        raise RunBudgetExceeded(f"run {idx} failed: {batch.failed[0]}")
    truth = truth_augmented(setup, batch)
    means = filter_batch(setup, batch)
    out = _out(args)
    header = trace_header(setup, list(means))
    write_trace(out / "trace.csv", header, trace_rows(setup, batch, 0, truth, means))
    theta_ss = setup.est_model.ss.theta
    final = {k: (m[0, -scenario.window:, setup.est_model.n_x:].mean(axis=0) + theta_ss).tolist()
             for k, m in means.items()}
    info = {"case_id": scenario.case_id, "seed": scenario.seed, "run_index": idx,
            "health_class": cls.label, "targets": batch.targets[0].tolist(),
            "health_names": setup.est_model.health_names(), "window_mean_health": final}
    dump_json(out / "run.json", info)
    print(json.dumps(info, indent=2))
    return 0


def cmd_case(args) -> int:
    scenario = _scenario(args)
    result = run_case(scenario, jobs=args.jobs, retain=args.retain_traces)
    out = _out(args)
    doc = write_case_outputs(out, result)
    print(format_tables(doc), end="")
    return 0


def cmd_theorems(args) -> int:
    scenario = _scenario(args)
    report = run_theorem_suite(scenario, n_random=args.random_models, monte_carlo_runs=args.mc_runs)
    out = _out(args)
    dump_json(out / "theorem_report.json", report)
    summary = {k: v["pass"] if isinstance(v, dict) and "pass" in v else v.get("pass_rate")
               for k, v in report.items() if isinstance(v, dict)}
    print(json.dumps({"pass": report["pass"], **summary}, indent=2))
    return 0 if report["pass"] else 1


def cmd_report(args) -> int:
    out = Path(args.out)
    runs = out / "runs.json"
    if not runs.exists():
        raise ConfigError(f"no run records in {out}")
    data = json.loads(runs.read_text(encoding="utf-8"))
    scenario = ScenarioConfig.from_dict(data["scenario"], base_dir=data.get("base_dir")).validate()
    doc = reaggregate(out, prepare(scenario), source=args.source)
    target = Path(args.write) if args.write else out / "metrics.json"
    dump_json(target, doc)
    print(format_tables(doc), end="")
    return 0


def cmd_validate_model(args) -> int:
    model = load_model(args.model, check_structure=False)
    report = structural_report(model)
    report["names"] = {"x": model.state_names(), "u": model.input_names(),
                       "y": model.output_names(), "theta": model.health_names()}
    report["A_spectral_radius"] = float(np.max(np.abs(np.linalg.eigvals(model.A))))
    print(("OK" if report["ok"] else "INVALID") + " " + args.model)
    print(json.dumps(report, indent=2))
    return 0 if report["ok"] else 2


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apu-fdi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="case JSON path, or case1/case2/case3 (default case1)")
        sp.add_argument("--seed", type=_u64, help="override the master seed")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--estimators", help="comma list from pes,pens,mpes")

    sp = sub.add_parser("simulate", help="simulate one run and dump its trace")
    common(sp, "out/simulate")
    sp.add_argument("--run-index", type=int, default=0)
    sp.add_argument("--health-class", default="medium", choices=[c.name.lower() for c in HealthClass])
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("case", help="run a full Monte Carlo case")
    common(sp, "out/case")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.add_argument("--retain-traces", action="store_true", help="write a trace CSV per run")
    sp.add_argument("--runs-per-class", type=int, help="override runs per class")
    sp.set_defaults(func=cmd_case)

    sp = sub.add_parser("theorems", help="run the estimator theorem checks")
    common(sp, "out/theorems")
    sp.add_argument("--random-models", type=int, default=100)
    sp.add_argument("--mc-runs", type=int, default=10_000)
    sp.set_defaults(func=cmd_theorems)

    sp = sub.add_parser("report", help="re-aggregate metrics from a case output directory")
    sp.add_argument("--out", required=True, help="case output directory")
    sp.add_argument("--source", choices=["auto", "traces", "summaries"], default="auto")
    sp.add_argument("--write", help="write metrics here instead of <out>/metrics.json")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("validate-model", help="check a model file's structure")
    sp.add_argument("model")
    sp.set_defaults(func=cmd_validate_model)
    return p


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ModelError, HypothesisError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail("config", exc, 2)
    except RunBudgetExceeded as exc:
        return _fail("run_budget_exceeded", exc, 3)
    except Exception as exc:  # noqa: BLE001 - report everything as JSON
        return _fail("internal", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
