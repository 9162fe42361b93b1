"""Monte Carlo case execution and aggregation.

Runs are split into chunks that may execute in worker processes. Each run
is reduced to a small summary (squared-error sums and window means), and
summaries are folded in run-index order, so aggregates do not depend on
chunking, worker count or completion order.
"""

from __future__ import annotations

import concurrent.futures as cf
import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .config import ScenarioConfig
from .estimator import (
    CovarianceSchedule, EstimatorConfig, EstimatorKind, GaussianBelief,
    covariance_schedule, filter_means, stand_in_power,
)
from .fdi import ConfusionMatrix, HealthClass, class_of, improvement, macro_metrics
from .model import GasGenModel, augment
from .plant import Batch, simulate_batch

KIND_ORDER = ("pes", "pens", "mpes")


class RunBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class CaseSetup:
    """Everything derived once per case: models, estimator settings, gain schedules."""

    scenario: ScenarioConfig
    truth_model: GasGenModel
    est_model: GasGenModel
    init: GaussianBelief
    estimators: dict
    schedules: dict
    truth_columns: tuple     # which full-health columns the estimator tracks

    @property
    def aug(self):
        return augment(self.est_model)

    def variable_names(self) -> list[str]:
        return self.est_model.state_names() + self.est_model.health_names()


def initial_belief(scenario: ScenarioConfig, model: GasGenModel) -> GaussianBelief:
    s = scenario.estimator
    x_var = (s.init_x_std_pct / 100.0 * model.ss.x) ** 2
    th_var = np.full(model.n_theta, s.init_theta_std ** 2)
    return GaussianBelief(np.zeros(model.n_x + model.n_theta), np.diag(np.concatenate([x_var, th_var])))


def estimator_configs(scenario: ScenarioConfig, model: GasGenModel) -> dict[str, EstimatorConfig]:
    pPeT = scenario.pPeT_value(model.ss.Pe)
    peT = scenario.estimator.peT
    out = {}
    for name in KIND_ORDER:
        if name in scenario.estimators:
            out[name] = EstimatorConfig(EstimatorKind(name), peT=peT, pPeT=pPeT)
    return out


def prepare(scenario: ScenarioConfig) -> CaseSetup:
    truth = scenario.truth_model()
    est = scenario.estimator_model()
    init = initial_belief(scenario, est)
    aug = augment(est)
    confs = estimator_configs(scenario, est)
    pe_var = scenario.pe_variance(est.ss.Pe)
    schedules = {}
    for name, conf in confs.items():
        var = pe_var if conf.kind is EstimatorKind.PES else conf.pPeT
        # MPES shares the PENS schedule only by theorem; compute it independently
        schedules[name] = covariance_schedule(aug, init.cov, var, scenario.n_steps)
    if scenario.degradation.mode == "coupled":
        cols = tuple(int(p[0]) for p in scenario.degradation.pairs)
    else:
        cols = tuple(range(est.n_theta))
    return CaseSetup(scenario, truth, est, init, confs, schedules, cols)


def truth_augmented(setup: CaseSetup, batch: Batch) -> np.ndarray:
    """Truth in estimator coordinates, (R, T+1, n)."""
    th = batch.theta[:, :, list(setup.truth_columns)]
    return np.concatenate([batch.x, th], axis=2)


def filter_batch(setup: CaseSetup, batch: Batch) -> dict[str, np.ndarray]:
    """Posterior means per estimator, (R, T+1, n) with the initial mean at index 0."""
    aug = setup.aug
    out = {}
    for name, conf in setup.estimators.items():
        pe = stand_in_power(conf, batch.pe_reported[:, 1:])
        m = filter_means(aug, setup.schedules[name], setup.init.mean,
                         batch.u[:, 1:], batch.y[:, 1:], pe)
        init = np.broadcast_to(setup.init.mean, (len(batch), 1, aug.n))
        out[name] = np.concatenate([init, m], axis=1)
    return out


# ------------------------------------------------------------ summaries

@dataclass
class RunSummary:
    run_index: int
    health_class: int
    failed: str | None
    sse: dict = field(default_factory=dict)          # kind -> (n,) squared-error sums
    count: int = 0
    window_mean: dict = field(default_factory=dict)  # kind -> (n_theta,) absolute health means


def summarize_run(run_index: int, health_class: int, truth: np.ndarray, means: dict,
                  rmse_start: int, window: int, n_x: int, theta_ss: np.ndarray,
                  failed: str | None = None) -> RunSummary:
    s = RunSummary(int(run_index), int(health_class), failed)
    if failed:
        return s
    T = truth.shape[0] - 1
    lo = max(rmse_start, 1)
    s.count = T + 1 - lo
    for name, m in means.items():
        err = m[lo:] - truth[lo:]
        s.sse[name] = np.array([float(np.sum(err[:, i] ** 2)) for i in range(err.shape[1])])
        tail = m[T + 1 - window:, n_x:]
        s.window_mean[name] = np.array([float(np.mean(tail[:, i])) for i in range(tail.shape[1])]) + theta_ss
    return s


def _process_chunk(scenario: ScenarioConfig, indices: Sequence[int], retain: bool):
    setup = prepare(scenario)
    rpc = scenario.runs_per_class
    classes = [HealthClass(i // rpc) for i in indices]
    batch = simulate_batch(scenario, indices, classes, setup.truth_model)
    truth = truth_augmented(setup, batch)
    means = filter_batch(setup, batch)
    summaries = []
    for r, idx in enumerate(indices):
        failed = batch.failed[r]
        per = {k: v[r] for k, v in means.items()}
        if failed is None and not all(np.all(np.isfinite(v)) for v in per.values()):
            failed = "non-finite estimate"
        summaries.append(summarize_run(idx, classes[r], truth[r], per, scenario.rmse_start,
                                       scenario.window, setup.est_model.n_x,
                                       setup.est_model.ss.theta, failed))
    kept = (batch, truth, means) if retain else None
    return summaries, kept


def aggregate(summaries: Sequence[RunSummary], variable_names: Sequence[str], n_x: int,
              kinds: Sequence[str]) -> tuple[dict, dict]:
    """Fold run summaries (in run-index order) into metrics and confusion matrices."""
    summaries = sorted(summaries, key=lambda s: s.run_index)
    ok = [s for s in summaries if not s.failed]
    n_var = len(variable_names)
    health = list(variable_names[n_x:])
    rmse = {}
    for k in kinds:
        tot = np.zeros(n_var)
        cnt = 0
        for s in ok:
            tot = tot + s.sse[k]
            cnt += s.count
        rmse[k] = {v: float(np.sqrt(tot[i] / cnt)) if cnt else float("nan")
                   for i, v in enumerate(variable_names)}
    confusions = {}
    for j, name in enumerate(health):
        for k in kinds:
            counts = np.zeros((4, 4), dtype=np.int64)
            for s in ok:
                counts[s.health_class, int(class_of(s.window_mean[k][j]))] += 1
            confusions[(name, k)] = ConfusionMatrix(counts)
    fdi = {}
    for k in kinds:
        pooled = ConfusionMatrix(np.zeros((4, 4), dtype=np.int64))
        for name in health:
            pooled = pooled + confusions[(name, k)]
        m = macro_metrics(pooled) if pooled.total else {}
        m["severe_tpr"] = pooled.true_positive_rate(HealthClass.SEVERE)
        fdi[k] = m
    imp = {}
    if "pes" in kinds and "pens" in kinds:
        imp = {v: improvement(rmse["pens"][v], rmse["pes"][v]) for v in variable_names}
    metrics = {
        "variables": list(variable_names),
        "rmse": rmse,
        "improvement_pct": imp,
        "fdi": fdi,
        "confusion_rates": {
            name: {k: confusions[(name, k)].rates().round(12).tolist() for k in kinds}
            for name in health
        },
        "confusion_counts": {
            name: {k: confusions[(name, k)].counts.tolist() for k in kinds}
            for name in health
        },
        "runs": {"total": len(summaries), "failed": len(summaries) - len(ok),
                 "failures": {str(s.run_index): s.failed for s in summaries if s.failed}},
    }
    return metrics, confusions


@dataclass
class ExperimentResult:
    scenario: ScenarioConfig
    metrics: dict
    confusions: dict
    summaries: list
    retained: list | None = None
    setup: CaseSetup | None = None

    def metrics_document(self) -> dict:
        return {
            "case_id": self.scenario.case_id,
            "provenance": provenance(self.scenario),
            **self.metrics,
        }


def provenance(scenario: ScenarioConfig) -> dict:
    return {"config_hash": scenario.config_hash(), "seed": scenario.seed, "code_version": __version__}


def _chunks(indices: Sequence[int], n_chunks: int) -> list[list[int]]:
    n_chunks = max(1, min(n_chunks, len(indices)))
    return [list(c) for c in np.array_split(np.asarray(indices), n_chunks) if len(c)]


def run_case(scenario: ScenarioConfig, jobs: int = 1, retain: bool = False,
             order: Sequence[int] | None = None, chunk_size: int | None = None,
             failure_budget: float = 0.01) -> ExperimentResult:
    """Simulate every class x run, filter with each estimator and aggregate.

    ``order`` permutes the execution order of runs; it never changes the
    result. More than ``failure_budget`` failed runs raises RunBudgetExceeded.
    """
    scenario.validate()
    n_total = 4 * scenario.runs_per_class
    indices = list(range(n_total)) if order is None else [int(i) for i in order]
    if sorted(indices) != list(range(n_total)):
        raise ValueError("order must be a permutation of the run indices")
    if chunk_size is None:
        n_chunks = max(jobs, 1) if jobs > 1 else 1
        chunks = _chunks(indices, n_chunks)
    else:
        chunks = [indices[i:i + chunk_size] for i in range(0, n_total, chunk_size)]
    results = []
    if jobs > 1 and len(chunks) > 1:
        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_process_chunk, scenario, c, retain) for c in chunks]
            for fut in cf.as_completed(futs):
                results.append(fut.result())
    else:
        results = [_process_chunk(scenario, c, retain) for c in chunks]
    summaries = [s for res, _ in results for s in res]
    setup = prepare(scenario)
    metrics, confusions = aggregate(summaries, setup.variable_names(), setup.est_model.n_x,
                                    list(setup.estimators))
    failed = metrics["runs"]["failed"]
    if failed > failure_budget * n_total:
        raise RunBudgetExceeded(f"{failed} of {n_total} runs failed")
    retained = [kept for _, kept in results] if retain else None
    return ExperimentResult(scenario, metrics, confusions, summaries, retained, setup)


def with_overrides(scenario: ScenarioConfig, **changes) -> ScenarioConfig:
    """Copy a scenario replacing top-level fields (nested ones via dicts)."""
    new = dataclasses.replace(scenario)
    for key, value in changes.items():
        cur = getattr(new, key)
        if dataclasses.is_dataclass(cur) and isinstance(value, dict):
            value = dataclasses.replace(cur, **value)
        setattr(new, key, value)
    return new
