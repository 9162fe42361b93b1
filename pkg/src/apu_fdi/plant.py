"""Ground-truth simulation: degradation ramps, load profiles, PI speed loop.

Per step ``k = 1..T`` the closed loop is::

    u[k] = PI(N_m[k-1])
    x[k] = A x[k-1] + B u[k] + E dtheta[k-1] + F Pe[k] + w[k]
    y[k] = C x[k]   + D u[k] + G dtheta[k]   + v[k]

The speed channel has no feedthrough, so the controller never sees the
input it is about to choose.

Every run owns a PCG64 stream seeded by ``SeedSequence([seed, run_index])``
and spawned into four children, in this order: degradation targets, load
profile, shaft-power estimate noise, plant noise (process then measurement).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import LoadConfig, ScenarioConfig
from .fdi import HealthClass
from .model import GasGenModel

_STREAMS = ("degradation", "load", "pe_estimate", "plant")


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None, run_index: int | None = None):
        where = []
        if run_index is not None:
            where.append(f"run {run_index}")
        if step is not None:
            where.append(f"step {step}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.step = step
        self.run_index = run_index


def run_streams(seed: int, run_index: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence([int(seed), int(run_index)]).spawn(len(_STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(_STREAMS, children)}


# ------------------------------------------------------------ degradation

@dataclass(frozen=True)
class DegradationPlan:
    """Target class per independent health parameter and the ramp shape.

    With ``coupling`` set, each pair ``(i, j)`` derives parameter j from i
    through ``f = 1 - k (1 - e)``; ``classes`` then lists one entry per pair
    and ``n_full`` is the size of the full health vector.
    """

    classes: tuple
    ramp_start: int
    ramp_end: int
    targets: tuple | None = None
    coupling: tuple | None = None     # ((i, j, k), ...)
    n_full: int | None = None

    def sample_targets(self, rng: np.random.Generator) -> np.ndarray:
        out = []
        for cls in self.classes:
            lo, hi = HealthClass(cls).sampling_interval
            if not lo < hi:
                raise ValueError(f"invalid class interval [{lo}, {hi})")
            out.append(rng.uniform(lo, hi))
        return np.array(out)


def make_degradation(plan: DegradationPlan, n_steps: int,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Absolute health trajectory of shape (n_steps + 1, n_full).

    Each independent parameter ramps linearly from 1.0 at ``ramp_start`` to
    its target at ``ramp_end`` and holds it afterwards.
    """
    if n_steps < plan.ramp_end:
        raise ValueError("horizon ends before the degradation ramp")
    if plan.targets is not None:
        targets = np.asarray(plan.targets, dtype=float)
    elif rng is not None:
        targets = plan.sample_targets(rng)
    else:
        raise ValueError("plan has no targets and no rng was given")
    k = np.arange(n_steps + 1, dtype=float)
    span = max(plan.ramp_end - plan.ramp_start, 1)
    frac = np.clip((k - plan.ramp_start) / span, 0.0, 1.0)
    indep = 1.0 - frac[:, None] * (1.0 - targets[None, :])
    if plan.coupling is None:
        return indep
    n_full = plan.n_full or 2 * len(plan.coupling)
    theta = np.ones((n_steps + 1, n_full))
    for col, (i, j, kk) in enumerate(plan.coupling):
        e = indep[:, col]
        theta[:, i] = e
        theta[:, j] = 1.0 - kk * (1.0 - e)
    return theta


def plan_for(scenario: ScenarioConfig, health_class: HealthClass, n_full: int) -> DegradationPlan:
    d = scenario.degradation
    if d.mode == "coupled":
        ks = [d.k_c, d.k_t]
        coupling = tuple((int(i), int(j), float(ks[n])) for n, (i, j) in enumerate(d.pairs))
        return DegradationPlan(tuple([health_class] * len(coupling)), d.ramp_start, d.ramp_end,
                               coupling=coupling, n_full=n_full)
    return DegradationPlan(tuple([health_class] * n_full), d.ramp_start, d.ramp_end)


# ------------------------------------------------------------ shaft power

@dataclass(frozen=True)
class LoadProfile:
    """True shaft-power deviation and the starter/generator report, per step."""

    truth: np.ndarray
    reported: np.ndarray
    var: np.ndarray


def make_load_profile(config: LoadConfig, n_steps: int, rng: np.random.Generator,
                      pe_ss: float, estimate_rng: np.random.Generator | None = None) -> LoadProfile:
    """Piecewise-constant random load with jitter; index 0 is the initial point.

    Levels change after exponentially distributed intervals and are drawn
    uniformly within ``+-amplitude_pct`` of ``pe_ss``. The report adds
    zero-mean Gaussian noise with the declared variance.
    """
    estimate_rng = rng if estimate_rng is None else estimate_rng
    T = n_steps + 1
    level = np.zeros(T)
    amp = config.amplitude_pct / 100.0 * pe_ss
    if config.mean_interval and config.mean_interval > 0 and np.isfinite(config.mean_interval):
        t = rng.exponential(config.mean_interval)
        changes = []
        while t < T:
            changes.append((int(np.ceil(t)), rng.uniform(-amp, amp)))
            t += rng.exponential(config.mean_interval)
        for start, value in changes:
            if start < T:
                level[start:] = value
    jitter_std = config.jitter_pct / 100.0 * pe_ss
    truth = level + (rng.normal(0.0, jitter_std, T) if jitter_std > 0 else 0.0)
    est_std = config.estimate_noise_pct / 100.0 * pe_ss
    noise = estimate_rng.normal(0.0, est_std, T) if est_std > 0 else np.zeros(T)
    return LoadProfile(truth=truth, reported=truth + noise, var=np.full(T, est_std ** 2))


# ------------------------------------------------------------ controller

@dataclass
class PIController:
    """Discrete PI regulator on shaft-speed deviation with anti-windup.

    ``integrator`` may be a scalar or an array (one entry per parallel run).
    The integrator is frozen on steps where the output saturates.
    """

    kp: float
    ki: float
    u_min: float = -np.inf
    u_max: float = np.inf
    integrator: np.ndarray | float = 0.0

    def __call__(self, speed_dev):
        err = np.asarray(speed_dev, dtype=float)
        integ = self.integrator + err
        u = -(self.kp * err + self.ki * integ)
        saturated = (u > self.u_max) | (u < self.u_min)
        self.integrator = np.where(saturated, self.integrator, integ)
        u = np.clip(u, self.u_min, self.u_max)
        if np.ndim(u) == 0:
            self.integrator = float(self.integrator)
            return float(u)
        return u


def pi_control(controller: PIController, speed_dev):
    return controller(speed_dev)


# ------------------------------------------------------------ plant step

def step_plant(state, model: GasGenModel, u, theta_dev, pe_dev,
               rng: np.random.Generator | None = None, theta_dev_next=None,
               w=None, v=None):
    """Advance the deviation-form plant by one step.

    ``theta_dev`` enters the state equation; ``theta_dev_next`` (defaulting
    to ``theta_dev``) enters the measurement. Noise is drawn from ``rng``
    unless passed explicitly; with neither, the step is noise-free.
    """
    x = np.asarray(state, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    th = np.asarray(theta_dev, dtype=float).reshape(-1)
    th_next = th if theta_dev_next is None else np.asarray(theta_dev_next, dtype=float).reshape(-1)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u)) and np.isfinite(pe_dev)):
        raise SimulationError("non-finite plant input")
    if w is None:
        w = rng.multivariate_normal(np.zeros(model.n_x), model.Q) if rng is not None else 0.0
    if v is None:
        v = rng.multivariate_normal(np.zeros(model.n_y), model.R) if rng is not None else 0.0
    x_next = model.A @ x + model.B @ u + model.E @ th + model.F[:, 0] * pe_dev + w
    y = model.C @ x_next + model.D @ u + model.G @ th_next + v
    return x_next, y


# ------------------------------------------------------------ full runs

@dataclass
class RunRecord:
    """One closed-loop run in deviation coordinates; index 0 is the initial point."""

    run_index: int
    seed: int
    health_class: HealthClass
    targets: np.ndarray          # independent-parameter targets (absolute)
    x: np.ndarray                # (T+1, n_x)
    theta: np.ndarray            # (T+1, n_theta_full) deviations
    y: np.ndarray                # (T+1, n_y)
    u: np.ndarray                # (T+1, n_u)
    pe_true: np.ndarray          # (T+1,)
    pe_reported: np.ndarray      # (T+1,)
    pe_var: np.ndarray           # (T+1,)
    failed: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.y.shape[0] - 1


@dataclass
class Batch:
    """Stacked runs: every array has a leading run axis."""

    run_index: np.ndarray
    classes: np.ndarray
    targets: np.ndarray
    x: np.ndarray
    theta: np.ndarray
    y: np.ndarray
    u: np.ndarray
    pe_true: np.ndarray
    pe_reported: np.ndarray
    pe_var: np.ndarray
    failed: list
    seed: int

    def __len__(self) -> int:
        return len(self.run_index)

    def record(self, i: int) -> RunRecord:
        return RunRecord(
            run_index=int(self.run_index[i]), seed=self.seed,
            health_class=HealthClass(int(self.classes[i])), targets=self.targets[i],
            x=self.x[i], theta=self.theta[i], y=self.y[i], u=self.u[i],
            pe_true=self.pe_true[i], pe_reported=self.pe_reported[i], pe_var=self.pe_var[i],
            failed=self.failed[i],
        )


def simulate_batch(scenario: ScenarioConfig, run_indices: Sequence[int],
                   classes: Sequence[HealthClass], model: GasGenModel | None = None) -> Batch:
    """Simulate several runs in lock-step; each keeps its own random streams.

    Arithmetic is elementwise across runs, so a run's trajectory does not
    depend on which other runs share the batch.
    """
    model = scenario.truth_model() if model is None else model
    T = scenario.n_steps
    n_runs = len(run_indices)
    nx, ny, nth = model.n_x, model.n_y, model.n_theta
    pe_ss = model.ss.Pe

    theta = np.empty((n_runs, T + 1, nth))
    targets = []
    pe_true = np.empty((n_runs, T + 1))
    pe_rep = np.empty((n_runs, T + 1))
    pe_var = np.empty((n_runs, T + 1))
    w = np.empty((n_runs, T + 1, nx))
    v = np.empty((n_runs, T + 1, ny))
    q_std = np.sqrt(np.diag(model.Q))
    r_std = np.sqrt(np.diag(model.R))
    if np.count_nonzero(model.Q - np.diag(np.diag(model.Q))) or \
            np.count_nonzero(model.R - np.diag(np.diag(model.R))):
        raise SimulationError("plant noise covariances must be diagonal")
    for r, (idx, cls) in enumerate(zip(run_indices, classes)):
        s = run_streams(scenario.seed, idx)
        plan = plan_for(scenario, HealthClass(cls), nth)
        tgt = plan.sample_targets(s["degradation"])
        targets.append(tgt)
        theta[r] = make_degradation(
            DegradationPlan(plan.classes, plan.ramp_start, plan.ramp_end, tuple(tgt),
                            plan.coupling, plan.n_full), T) - model.ss.theta
        prof = make_load_profile(scenario.load, T, s["load"], pe_ss, s["pe_estimate"])
        pe_true[r], pe_rep[r], pe_var[r] = prof.truth, prof.reported, prof.var
        z = s["plant"].standard_normal((T + 1, nx + ny))
        w[r] = z[:, :nx] * q_std
        v[r] = z[:, nx:] * r_std

    ctrl = scenario.controller
    pi = PIController(ctrl.kp, ctrl.ki, ctrl.u_min, ctrl.u_max, np.zeros(n_runs))
    x = np.zeros((n_runs, T + 1, nx))
    y = np.zeros((n_runs, T + 1, ny))
    u = np.zeros((n_runs, T + 1, model.n_u))
    speed = 0   # speed channel index
    y[:, 0] = _rows(x[:, 0], model.C) + _rows(theta[:, 0], model.G) + v[:, 0]
    limit = scenario.divergence_factor * np.abs(model.ss.x)
    failed = [None] * n_runs
    alive = np.ones(n_runs, dtype=bool)
    f = model.F[:, 0]
    for k in range(1, T + 1):
        uk = pi(y[:, k - 1, speed])
        u[:, k, 0] = uk
        if model.n_u > 1:
            u[:, k, 1:] = 0.0
        xk = (_rows(x[:, k - 1], model.A) + _rows(u[:, k], model.B)
              + _rows(theta[:, k - 1], model.E) + pe_true[:, k:k + 1] * f + w[:, k])
        x[:, k] = xk
        y[:, k] = _rows(xk, model.C) + _rows(u[:, k], model.D) + _rows(theta[:, k], model.G) + v[:, k]
        bad = alive & (~np.all(np.isfinite(xk), axis=1) | np.any(np.abs(xk) > limit, axis=1))
        if bad.any():
            for r in np.flatnonzero(bad):
                failed[r] = f"divergence at step {k}"
            alive &= ~bad
    return Batch(
        run_index=np.asarray(run_indices, dtype=np.int64), classes=np.asarray(classes, dtype=np.int64),
        targets=np.array(targets), x=x, theta=theta, y=y, u=u, pe_true=pe_true,
        pe_reported=pe_rep, pe_var=pe_var, failed=failed, seed=scenario.seed,
    )


def _rows(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    out = np.zeros((X.shape[0], M.shape[0]))
    for j in range(M.shape[1]):
        out += X[:, j:j + 1] * M[:, j]
    return out


def simulate_run(scenario: ScenarioConfig, seed: int | None = None, run_index: int = 0,
                 health_class: HealthClass = HealthClass.MEDIUM) -> RunRecord:
    """Simulate a single run; reproducible from ``(seed, run_index)``."""
    if seed is not None and seed != scenario.seed:
        from dataclasses import replace
        scenario = replace(scenario, seed=int(seed))
    batch = simulate_batch(scenario, [run_index], [health_class])
    rec = batch.record(0)
    if rec.failed:
        raise SimulationError(rec.failed, run_index=run_index)
    return rec
