"""Augmented Kalman estimators with and without shaft-power information.

Three predictors share one measurement update:

* PES  - prior mean and covariance use the reported shaft power and its
  variance.
* PENS - shaft power is unavailable; a typical value ``PeT`` with a large
  variance ``pPeT`` stands in for it.
* MPES - the reported shaft power drives the mean but the covariance is
  inflated with ``pPeT`` exactly as in PENS. It exists to connect the other
  two in the analysis.

Covariances and gains never depend on the data, so for constant matrices a
whole gain schedule can be computed once and reused for any number of runs
(`covariance_schedule` + `filter_means`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .model import AugmentedModel

DEFAULT_MAX_COND = 1e12


class EstimationError(RuntimeError):
    """A filter step failed; ``step`` is the zero-based input index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class SingularInnovationError(EstimationError):
    def __init__(self, cond: float, step: int | None = None):
        super().__init__(f"innovation covariance is ill-conditioned (cond={cond:.3e})", step)
        self.cond = cond


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class ShaftPowerInput:
    Pe: float
    var: float

    def __post_init__(self):
        if not self.var >= 0.0:
            raise ValueError(f"shaft power variance must be >= 0, got {self.var}")


class EstimatorKind(enum.Enum):
    PES = "pes"
    PENS = "pens"
    MPES = "mpes"


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator selection plus the stand-in shaft power used by PENS/MPES."""

    kind: EstimatorKind
    peT: float = 0.0
    pPeT: float = 1.0

    def __post_init__(self):
        if self.kind is not EstimatorKind.PES and not self.pPeT > 0.0:
            raise ValueError(f"pPeT must be > 0, got {self.pPeT}")


@dataclass(frozen=True)
class StepDiagnostics:
    K: np.ndarray
    prior_cov: np.ndarray
    post_cov: np.ndarray
    innovation: np.ndarray


@dataclass(frozen=True)
class StepInput:
    """Data for one filter step: input held over the step, measurement, reported power."""

    u: np.ndarray
    y: np.ndarray
    pe: ShaftPowerInput


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise EstimationError(f"non-finite {name}")


def _predict(belief: GaussianBelief, aug: AugmentedModel, u, pe_mean: float,
             pe_var: float) -> GaussianBelief:
    u = np.asarray(u, dtype=float).reshape(-1)
    if belief.mean.size != aug.n:
        raise ValueError(f"belief has dimension {belief.mean.size}, model expects {aug.n}")
    if u.size != aug.B.shape[1]:
        raise ValueError(f"input has length {u.size}, model expects {aug.B.shape[1]}")
    _check_finite("predictor input", belief.mean, belief.cov, u, pe_mean, pe_var)
    f = aug.f
    mean = aug.A @ belief.mean + aug.B @ u + f * pe_mean
    cov = aug.A @ belief.cov @ aug.A.T + pe_var * np.outer(f, f) + aug.Q
    return GaussianBelief(mean, _sym(cov))


def predict_pes(belief: GaussianBelief, aug: AugmentedModel, u, pe: ShaftPowerInput) -> GaussianBelief:
    return _predict(belief, aug, u, pe.Pe, pe.var)


def predict_pens(belief: GaussianBelief, aug: AugmentedModel, u, peT: ShaftPowerInput) -> GaussianBelief:
    """PENS prior: the stand-in ``peT`` replaces the reported power entirely."""
    return _predict(belief, aug, u, peT.Pe, peT.var)


def predict_mpes(belief: GaussianBelief, aug: AugmentedModel, u, pe: ShaftPowerInput,
                 pPeT: float) -> GaussianBelief:
    """MPES prior: reported power in the mean, inflated ``pPeT`` in the covariance."""
    if not pPeT > 0.0:
        raise ValueError(f"pPeT must be > 0, got {pPeT}")
    return _predict(belief, aug, u, pe.Pe, pPeT)


def innovation_factor(S: np.ndarray, max_cond: float = DEFAULT_MAX_COND):
    """Cholesky-factor an innovation covariance after a conditioning check."""
    lam = np.linalg.eigvalsh(S)
    cond = np.inf if lam[0] <= 0 else lam[-1] / lam[0]
    if not cond < max_cond:
        raise SingularInnovationError(cond)
    return scipy.linalg.cho_factor(S, lower=True)


def kalman_gain(P_prior: np.ndarray, C: np.ndarray, R: np.ndarray,
                max_cond: float = DEFAULT_MAX_COND) -> np.ndarray:
    S = _sym(C @ P_prior @ C.T + R)
    fac = innovation_factor(S, max_cond)
    # K = P C^T S^-1, solved as S K^T = C P
    return scipy.linalg.cho_solve(fac, C @ P_prior).T


def psd_root(M: np.ndarray) -> np.ndarray:
    """``L`` with ``L @ L.T == M`` for a symmetric PSD (possibly singular) matrix."""
    lam, V = np.linalg.eigh(_sym(M))
    return V * np.sqrt(np.clip(lam, 0.0, None))


def joseph(P_prior: np.ndarray, K: np.ndarray, C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``(I - K C) P (I - K C)^T + K R K^T``.

    Both terms are evaluated as Gram products ``M M^T`` of factored
    matrices, so the result stays PSD to within rounding of its own trace
    even when the posterior is far smaller than the prior.
    """
    M = (np.eye(P_prior.shape[0]) - K @ C) @ psd_root(P_prior)
    N = K @ psd_root(R)
    return _sym(M @ M.T + N @ N.T)


def update(prior: GaussianBelief, aug: AugmentedModel, D, u, y, R,
           max_cond: float = DEFAULT_MAX_COND) -> tuple[GaussianBelief, StepDiagnostics]:
    """Measurement update with the Joseph-form covariance."""
    D = np.asarray(D, dtype=float)
    R = np.asarray(R, dtype=float)
    u = np.asarray(u, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    C = aug.C
    if y.size != C.shape[0]:
        raise ValueError(f"measurement has length {y.size}, model expects {C.shape[0]}")
    if R.shape != (y.size, y.size) or D.shape != (y.size, u.size):
        raise ValueError("D or R has the wrong shape")
    _check_finite("measurement", y, u)
    K = kalman_gain(prior.cov, C, R, max_cond)
    innov = y - C @ prior.mean - D @ u
    mean = prior.mean + K @ innov
    cov = joseph(prior.cov, K, C, R)
    return GaussianBelief(mean, cov), StepDiagnostics(K, prior.cov, cov, innov)


def _stand_in(config: EstimatorConfig, pe: ShaftPowerInput) -> tuple[float, float]:
    if config.kind is EstimatorKind.PES:
        return pe.Pe, pe.var
    if config.kind is EstimatorKind.PENS:
        return config.peT, config.pPeT
    return pe.Pe, config.pPeT


def run_estimator(config: EstimatorConfig, aug: AugmentedModel, init: GaussianBelief,
                  inputs: Iterable[StepInput], max_cond: float = DEFAULT_MAX_COND,
                  ) -> list[tuple[GaussianBelief, StepDiagnostics]]:
    """Run predict/update over ``inputs`` and return every posterior.

    PES consumes the reported power and its variance, PENS ignores the report
    and uses the configured stand-in, MPES uses the reported mean with the
    stand-in variance.
    """
    out = []
    belief = init
    for k, step in enumerate(inputs):
        try:
            pe_mean, pe_var = _stand_in(config, step.pe)
            prior = _predict(belief, aug, step.u, pe_mean, pe_var)
            belief, diag = update(prior, aug, aug.D, step.u, step.y, aug.R, max_cond)
        except SingularInnovationError as exc:
            raise SingularInnovationError(exc.cond, k) from exc
        except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
            raise EstimationError(str(exc), k) from exc
        out.append((belief, diag))
    if not out:
        raise EstimationError("input sequence is empty")
    return out


# ------------------------------------------------------------ batched path

@dataclass(frozen=True)
class CovarianceSchedule:
    """Data-independent filter quantities for steps 1..T."""

    prior_covs: np.ndarray   # (T, n, n)
    gains: np.ndarray        # (T, n, n_y)
    post_covs: np.ndarray    # (T, n, n)
    init_cov: np.ndarray


def covariance_schedule(aug: AugmentedModel, init_cov: np.ndarray, pe_var,
                        n_steps: int, max_cond: float = DEFAULT_MAX_COND) -> CovarianceSchedule:
    """Propagate covariances and gains; ``pe_var`` is a scalar or per-step array."""
    pe_var = np.broadcast_to(np.asarray(pe_var, dtype=float), (n_steps,))
    n, ny = aug.n, aug.C.shape[0]
    priors = np.empty((n_steps, n, n))
    gains = np.empty((n_steps, n, ny))
    posts = np.empty((n_steps, n, n))
    ff = np.outer(aug.f, aug.f)
    P = np.asarray(init_cov, dtype=float)
    for k in range(n_steps):
        Pp = _sym(aug.A @ P @ aug.A.T + pe_var[k] * ff + aug.Q)
        try:
            K = kalman_gain(Pp, aug.C, aug.R, max_cond)
        except SingularInnovationError as exc:
            raise SingularInnovationError(exc.cond, k) from exc
        P = joseph(Pp, K, aug.C, aug.R)
        priors[k], gains[k], posts[k] = Pp, K, P
    return CovarianceSchedule(priors, gains, posts, np.array(init_cov, dtype=float))


def _rowmul(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``X @ M.T`` for a batch of row vectors with a fixed summation order.

    BLAS may pick different kernels for different batch sizes, which makes
    results depend on how runs are chunked; this keeps each row bit-stable.
    """
    out = np.zeros((X.shape[0], M.shape[0]))
    for j in range(M.shape[1]):
        out += X[:, j:j + 1] * M[:, j]
    return out


def filter_means(aug: AugmentedModel, schedule: CovarianceSchedule, init_mean,
                 u: np.ndarray, y: np.ndarray, pe: np.ndarray) -> np.ndarray:
    """Posterior means for a batch of runs sharing one gain schedule.

    ``u`` is (R, T, n_u), ``y`` (R, T, n_y) and ``pe`` (R, T) holds the
    shaft power fed to the mean (reported power, or the stand-in for PENS).
    Returns (R, T, n).
    """
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    pe = np.asarray(pe, dtype=float)
    n_runs, n_steps = y.shape[:2]
    x = np.broadcast_to(np.asarray(init_mean, dtype=float), (n_runs, aug.n)).copy()
    out = np.empty((n_runs, n_steps, aug.n))
    f = aug.f
    for k in range(n_steps):
        uk = u[:, k, :]
        xp = _rowmul(x, aug.A) + _rowmul(uk, aug.B) + pe[:, k:k + 1] * f
        innov = y[:, k, :] - _rowmul(xp, aug.C) - _rowmul(uk, aug.D)
        x = xp + _rowmul(innov, schedule.gains[k])
        out[:, k, :] = x
    return out


def stand_in_power(config: EstimatorConfig, pe_reported: np.ndarray) -> np.ndarray:
    """Shaft power the estimator's mean recursion sees."""
    if config.kind is EstimatorKind.PENS:
        return np.full_like(pe_reported, config.peT, dtype=float)
    return np.asarray(pe_reported, dtype=float)


def stand_in_variance(config: EstimatorConfig, pe_var) -> np.ndarray | float:
    if config.kind is EstimatorKind.PES:
        return pe_var
    return config.pPeT


def belief_sequence(results: Sequence[tuple[GaussianBelief, StepDiagnostics]]):
    """Stack run_estimator output into (means, covs, gains) arrays."""
    means = np.array([b.mean for b, _ in results])
    covs = np.array([b.cov for b, _ in results])
    gains = np.array([d.K for _, d in results])
    return means, covs, gains


# ------------------------------------------------------------ error covariances

def cee_recursion(aug: AugmentedModel, init_cov: np.ndarray, gains: np.ndarray,
                  true_pe_var) -> np.ndarray:
    """Covariance of the actual estimation error for a given gain sequence.

    The error of a filter whose mean is driven by the reported shaft power
    evolves as ``e+ = (I - K C)(A e + F (Pe_rep - Pe) - w) + K v``, whatever
    covariance the filter believes it has. ``true_pe_var`` is the variance of
    ``Pe_rep - Pe`` (scalar or per step). Returns (T, n, n) posteriors.
    """
    gains = np.asarray(gains, dtype=float)
    n_steps, n, ny = gains.shape
    if n != aug.n or ny != aug.C.shape[0]:
        raise ValueError(f"gains have shape {gains.shape[1:]}, model expects {(aug.n, aug.C.shape[0])}")
    init_cov = np.asarray(init_cov, dtype=float)
    if init_cov.shape != (n, n):
        raise ValueError(f"initial covariance has shape {init_cov.shape}, expected {(n, n)}")
    pe_var = np.broadcast_to(np.asarray(true_pe_var, dtype=float), (n_steps,))
    ff = np.outer(aug.f, aug.f)
    out = np.empty((n_steps, n, n))
    P = init_cov
    for k in range(n_steps):
        Pp = _sym(aug.A @ P @ aug.A.T + pe_var[k] * ff + aug.Q)
        P = joseph(Pp, gains[k], aug.C, aug.R)
        out[k] = P
    return out


def cee_recursion_pes(aug: AugmentedModel, init_cov: np.ndarray, gains: np.ndarray,
                      pe_var) -> np.ndarray:
    """Error covariance of PES; equals its reported covariance when ``pe_var`` is true."""
    return cee_recursion(aug, init_cov, gains, pe_var)


def cee_recursion_mpes(aug: AugmentedModel, init_cov: np.ndarray, gains: np.ndarray,
                       true_pe_var) -> np.ndarray:
    """Error covariance of MPES: inflated-variance gains, true power-error variance."""
    return cee_recursion(aug, init_cov, gains, true_pe_var)
