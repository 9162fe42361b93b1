"""Linear gas generator model and the health-parameter state augmentation.

The plant is kept in deviation form around a steady operating point::

    x[k] = A x[k-1] + B u[k] + E dtheta[k-1] + F Pe[k] + w[k]
    y[k] = C x[k]   + D u[k] + G dtheta[k]   + v[k]

Augmenting the state with the health deviations gives a standard linear
Gaussian system in ``z = [x; dtheta]`` whose health block follows a random
walk driven by ``Qh``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

BUILTIN_MODEL_FILE = "apu_gasgen.json"


class ModelError(ValueError):
    """Raised when a model violates a dimensional or structural requirement."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def _as_matrix(name: str, value, shape: tuple[int, int]) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 1 and shape[1] == 1:
        arr = arr.reshape(-1, 1)
    if arr.size == 0 and 0 in shape:
        arr = arr.reshape(shape)
    if arr.shape != shape:
        raise ModelError(f"matrix {name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"matrix {name} contains non-finite entries")
    return arr


def check_psd(name: str, M: np.ndarray, rtol: float = 1e-10) -> None:
    """Raise ModelError unless ``M`` is symmetric positive semidefinite.

    Eigenvalues down to ``-rtol * trace(M)`` are accepted as round-off.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return
    scale = max(abs(np.trace(M)), np.finfo(float).tiny)
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12 * scale):
        raise ModelError(f"covariance {name} is not symmetric")
    lam = np.linalg.eigvalsh(0.5 * (M + M.T))
    if lam.min() < -rtol * scale:
        raise ModelError(f"covariance {name} is not PSD (min eigenvalue {lam.min():.3e})")


@dataclass(frozen=True)
class SteadyState:
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    Pe: float


@dataclass(frozen=True)
class GasGenModel:
    """Deviation-form linear gas generator with constant matrices."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Qh: np.ndarray
    ss: SteadyState
    names: dict = field(default_factory=dict, compare=False)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def n_theta(self) -> int:
        return self.E.shape[1]

    def state_names(self) -> list[str]:
        return list(self.names.get("x", [f"x{i}" for i in range(self.n_x)]))

    def health_names(self) -> list[str]:
        return list(self.names.get("theta", [f"theta{i}" for i in range(self.n_theta)]))

    def output_names(self) -> list[str]:
        return list(self.names.get("y", [f"y{i}" for i in range(self.n_y)]))

    def input_names(self) -> list[str]:
        return list(self.names.get("u", [f"u{i}" for i in range(self.n_u)]))

    def replace(self, **changes) -> "GasGenModel":
        """Return a validated copy with some fields replaced."""
        fields = dict(
            A=self.A, B=self.B, C=self.C, D=self.D, E=self.E, F=self.F, G=self.G,
            Q=self.Q, R=self.R, Qh=self.Qh, ss=self.ss, names=self.names,
        )
        fields.update(changes)
        return build_model(**fields)


def build_model(A, B, C, D, E, F, G, Q, R, Qh, ss=None, names=None,
                check_structure: bool = False) -> GasGenModel:
    """Validate dimensions and covariances, then freeze a GasGenModel.

    ``check_structure`` additionally enforces the structural assumptions
    (nonzero F entries, no zero row in C, no zero column in G).
    """
    A = np.atleast_2d(np.array(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ModelError(f"matrix A must be square, got shape {A.shape}")
    n_x = A.shape[0]
    B = np.array(B, dtype=float)
    B = B.reshape(n_x, -1) if B.ndim < 2 else B
    n_u = B.shape[1]
    C = np.array(C, dtype=float)
    C = C.reshape(-1, n_x) if C.ndim < 2 else C
    n_y = C.shape[0]
    E = np.array(E, dtype=float)
    if E.ndim < 2:
        E = E.reshape(n_x, -1)
    n_th = E.shape[1]

    A = _as_matrix("A", A, (n_x, n_x))
    B = _as_matrix("B", B, (n_x, n_u))
    C = _as_matrix("C", C, (n_y, n_x))
    D = _as_matrix("D", D, (n_y, n_u))
    E = _as_matrix("E", E, (n_x, n_th))
    F = _as_matrix("F", F, (n_x, 1))
    G = _as_matrix("G", G, (n_y, n_th))
    Q = _as_matrix("Q", Q, (n_x, n_x))
    R = _as_matrix("R", R, (n_y, n_y))
    Qh = _as_matrix("Qh", Qh, (n_th, n_th))
    for name, M in (("Q", Q), ("R", R), ("Qh", Qh)):
        check_psd(name, M)

    if ss is None:
        ss = SteadyState(np.zeros(n_x), np.zeros(n_u), np.zeros(n_y), np.ones(n_th), 0.0)
    elif isinstance(ss, dict):
        ss = SteadyState(
            x=np.asarray(ss["x"], dtype=float),
            u=np.asarray(ss["u"], dtype=float),
            y=np.asarray(ss["y"], dtype=float),
            theta=np.asarray(ss.get("theta", np.ones(n_th)), dtype=float),
            Pe=float(np.asarray(ss.get("Pe", 0.0)).reshape(-1)[0]),
        )
    for name, vec, n in (("ss.x", ss.x, n_x), ("ss.u", ss.u, n_u),
                         ("ss.y", ss.y, n_y), ("ss.theta", ss.theta, n_th)):
        if np.shape(vec) != (n,):
            raise ModelError(f"{name} has length {np.size(vec)}, expected {n}")
    ss = SteadyState(_frozen(ss.x), _frozen(ss.u), _frozen(ss.y), _frozen(ss.theta), float(ss.Pe))

    model = GasGenModel(
        A=_frozen(A), B=_frozen(B), C=_frozen(C), D=_frozen(D), E=_frozen(E),
        F=_frozen(F), G=_frozen(G), Q=_frozen(Q), R=_frozen(R), Qh=_frozen(Qh),
        ss=ss, names=dict(names or {}),
    )
    if check_structure:
        problems = structural_report(model)["violations"]
        if problems:
            raise ModelError("; ".join(problems))
    return model


def structural_report(model: GasGenModel) -> dict:
    """Check the structural assumptions the shaft-power analysis relies on.

    Shaft power must reach every state (all of F nonzero), every output must
    see some state (no zero row of C) and every health parameter must show in
    some output (no zero column of G).
    """
    f_ok = [bool(v != 0.0) for v in model.F[:, 0]]
    c_ok = [bool(np.any(row != 0.0)) for row in model.C]
    g_ok = [bool(np.any(col != 0.0)) for col in model.G.T]
    violations = []
    for i, ok in enumerate(f_ok):
        if not ok:
            violations.append(f"F[{i}] is zero")
    for i, ok in enumerate(c_ok):
        if not ok:
            violations.append(f"C row {i} ({model.output_names()[i]}) is all zero")
    for j, ok in enumerate(g_ok):
        if not ok:
            violations.append(f"G column {j} ({model.health_names()[j]}) is all zero")
    return {
        "dims": {"n_x": model.n_x, "n_u": model.n_u, "n_y": model.n_y, "n_theta": model.n_theta},
        "F_nonzero": f_ok,
        "C_rows_nonzero": c_ok,
        "G_columns_nonzero": g_ok,
        "ok": not violations,
        "violations": violations,
    }


@dataclass(frozen=True)
class AugmentedModel:
    """State-space matrices for ``z = [x; dtheta]``.

    ``D`` and ``R`` are carried along unchanged since the output equation of
    the augmented system still needs them.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    F: np.ndarray
    Q: np.ndarray
    D: np.ndarray
    R: np.ndarray
    n_x: int
    n_theta: int

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def f(self) -> np.ndarray:
        """Shaft-power column as a flat vector."""
        return self.F[:, 0]


def augment(model: GasGenModel) -> AugmentedModel:
    n_x, n_th = model.n_x, model.n_theta
    n = n_x + n_th
    A = np.zeros((n, n))
    A[:n_x, :n_x] = model.A
    A[:n_x, n_x:] = model.E
    A[n_x:, n_x:] = np.eye(n_th)
    B = np.vstack([model.B, np.zeros((n_th, model.n_u))])
    C = np.hstack([model.C, model.G])
    F = np.vstack([model.F, np.zeros((n_th, 1))])
    Q = np.zeros((n, n))
    Q[:n_x, :n_x] = model.Q
    Q[n_x:, n_x:] = model.Qh
    return AugmentedModel(
        A=_frozen(A), B=_frozen(B), C=_frozen(C), F=_frozen(F), Q=_frozen(Q),
        D=model.D, R=model.R, n_x=n_x, n_theta=n_th,
    )


def absolute_to_deviation(value, ref) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if value.shape[-1:] != ref.shape[-1:]:
        raise ValueError(f"length mismatch: {value.shape} vs reference {ref.shape}")
    return value - ref


def deviation_to_absolute(dev, ref) -> np.ndarray:
    dev = np.asarray(dev, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if dev.shape[-1:] != ref.shape[-1:]:
        raise ValueError(f"length mismatch: {dev.shape} vs reference {ref.shape}")
    return dev + ref


def with_noise_levels(model: GasGenModel, process_pct: float, measurement_pct: float,
                      qh_std: float | None = None) -> GasGenModel:
    """Rebuild Q and R so each channel's noise std is a percentage of its reference.

    ``process_pct`` applies to every state, ``measurement_pct`` to every
    output channel. ``qh_std`` optionally resets Qh to ``qh_std**2 * I``.
    """
    q = (process_pct / 100.0 * model.ss.x) ** 2
    r = (measurement_pct / 100.0 * model.ss.y) ** 2
    changes = {"Q": np.diag(q), "R": np.diag(r)}
    if qh_std is not None:
        changes["Qh"] = np.eye(model.n_theta) * qh_std ** 2
    return model.replace(**changes)


def couple_health(model: GasGenModel, pairs: Sequence[tuple[int, int]],
                  k: Sequence[float]) -> GasGenModel:
    """Reduce the health vector under a linear flow/efficiency coupling.

    Each pair ``(i, j)`` ties parameter j to parameter i through
    ``theta_j = 1 - k * (1 - theta_i)``, i.e. ``dtheta_j = k * dtheta_i`` in
    deviation form, so column i of E and G absorbs ``k`` times column j.
    Unpaired parameters are dropped; the result has one health parameter
    per pair.
    """
    if len(pairs) != len(k):
        raise ModelError("one coupling coefficient is needed per pair")
    E_cols, G_cols, names, theta_ss, qh = [], [], [], [], []
    hn = model.health_names()
    for (i, j), kk in zip(pairs, k):
        E_cols.append(model.E[:, i] + kk * model.E[:, j])
        G_cols.append(model.G[:, i] + kk * model.G[:, j])
        names.append(hn[i])
        theta_ss.append(model.ss.theta[i])
        qh.append(model.Qh[i, i])
    ss = SteadyState(model.ss.x, model.ss.u, model.ss.y, np.array(theta_ss), model.ss.Pe)
    new_names = dict(model.names)
    new_names["theta"] = names
    return build_model(
        A=model.A, B=model.B, C=model.C, D=model.D,
        E=np.column_stack(E_cols), F=model.F, G=np.column_stack(G_cols),
        Q=model.Q, R=model.R, Qh=np.diag(qh), ss=ss, names=new_names,
    )


# ---------------------------------------------------------------- file I/O

def model_from_dict(data: dict, check_structure: bool = True) -> GasGenModel:
    try:
        return build_model(
            A=data["A"], B=data["B"], C=data["C"], D=data["D"], E=data["E"],
            F=data["F"], G=data["G"], Q=data["Q"], R=data["R"], Qh=data["Qh"],
            ss=data["ss"], names=data.get("names"), check_structure=check_structure,
        )
    except KeyError as exc:
        raise ModelError(f"model file is missing key {exc.args[0]!r}") from None


def model_to_dict(model: GasGenModel) -> dict:
    return {
        "version": 1,
        "dims": {"n_x": model.n_x, "n_u": model.n_u, "n_y": model.n_y, "n_theta": model.n_theta},
        "names": model.names,
        **{k: getattr(model, k).tolist() for k in ("A", "B", "C", "D", "E", "F", "G", "Q", "R", "Qh")},
        "ss": {
            "x": model.ss.x.tolist(), "u": model.ss.u.tolist(), "y": model.ss.y.tolist(),
            "theta": model.ss.theta.tolist(), "Pe": model.ss.Pe,
        },
    }


def load_model(path: str | Path | None = None, check_structure: bool = True) -> GasGenModel:
    """Load a model JSON file; with no path, load the shipped APU model."""
    if path is None:
        text = resources.files("apu_fdi.data.models").joinpath(BUILTIN_MODEL_FILE).read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text)
    dims = data.get("dims")
    model = model_from_dict(data, check_structure=check_structure)
    if dims is not None:
        actual = {"n_x": model.n_x, "n_u": model.n_u, "n_y": model.n_y, "n_theta": model.n_theta}
        for key, val in dims.items():
            if actual.get(key) != val:
                raise ModelError(f"dims.{key}={val} disagrees with matrices ({actual.get(key)})")
    return model


def save_model(model: GasGenModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2), encoding="utf-8")


def builtin_model() -> GasGenModel:
    return load_model(None)
