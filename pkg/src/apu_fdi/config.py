"""Scenario configuration: JSON-backed dataclasses for one Monte Carlo case."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .model import GasGenModel, couple_health, load_model, with_noise_levels


class ConfigError(ValueError):
    pass


@dataclass
class LoadConfig:
    mean_interval: float = 300.0      # steps between load changes (exponential); 0 disables changes
    amplitude_pct: float = 15.0       # new level ~ U(-a, a) percent of Pe_ss
    jitter_pct: float = 0.2           # per-step Gaussian jitter std, percent of Pe_ss
    estimate_noise_pct: float = 0.5   # std of the starter/generator power estimate, percent of Pe_ss


@dataclass
class DegradationConfig:
    mode: str = "independent"         # or "coupled"
    k_c: float = 1.0
    k_t: float = 1.0
    pairs: list = field(default_factory=lambda: [[0, 1], [2, 3]])
    ramp_start: int = 200
    ramp_end: int = 2200


@dataclass
class EstimatorSettings:
    peT: float = 0.0                  # deviation coordinates, i.e. Pe_ss in absolute terms
    pPeT: float | None = None         # explicit stand-in variance; None -> std-multiple rule
    pPeT_std_multiple: float = 1000.0
    init_x_std_pct: float = 0.5
    init_theta_std: float = 1e-3


@dataclass
class ControllerConfig:
    kp: float = 4.0e-5
    ki: float = 2.0e-6
    u_min: float = -0.02
    u_max: float = 0.03


@dataclass
class ScenarioConfig:
    case_id: str = "case1"
    model: str = "builtin"
    process_noise_pct: float = 0.5
    measurement_noise_pct: float = 0.5
    qh_std: float = 5e-4
    n_steps: int = 3000
    window: int = 500
    rmse_start: int = 200
    runs_per_class: int = 100
    seed: int = 42
    estimators: list = field(default_factory=lambda: ["pes", "pens", "mpes"])
    divergence_factor: float = 10.0
    load: LoadConfig = field(default_factory=LoadConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    estimator: EstimatorSettings = field(default_factory=EstimatorSettings)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    base_dir: str | None = field(default=None, repr=False, compare=False)

    # ---------------------------------------------------------------- checks
    def validate(self) -> "ScenarioConfig":
        for name in ("process_noise_pct", "measurement_noise_pct"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.qh_std < 0:
            raise ConfigError("qh_std must be >= 0")
        d = self.degradation
        if d.mode not in ("independent", "coupled"):
            raise ConfigError(f"unknown degradation mode {d.mode!r}")
        if not 0 <= d.ramp_start <= d.ramp_end <= self.n_steps:
            raise ConfigError("ramp must satisfy 0 <= ramp_start <= ramp_end <= n_steps")
        if not 0 < self.window <= self.n_steps:
            raise ConfigError("window must be within the horizon")
        if not 0 <= self.rmse_start < self.n_steps:
            raise ConfigError("rmse_start must be within the horizon")
        if self.runs_per_class < 1:
            raise ConfigError("runs_per_class must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        bad = set(self.estimators) - {"pes", "pens", "mpes"}
        if bad or not {"pes", "pens"} <= set(self.estimators):
            raise ConfigError(f"estimators must include pes and pens, got {self.estimators}")
        if self.estimator.pPeT is not None and not self.estimator.pPeT > 0:
            raise ConfigError("estimator.pPeT must be > 0")
        if self.model != "builtin" and not self.model_path().exists():
            raise ConfigError(f"model file not found: {self.model_path()}")
        return self

    # ------------------------------------------------------------ derived
    def model_path(self) -> Path:
        p = Path(self.model)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def truth_model(self) -> GasGenModel:
        """Full plant model with this case's noise levels."""
        base = load_model(None if self.model == "builtin" else self.model_path())
        return with_noise_levels(base, self.process_noise_pct, self.measurement_noise_pct, self.qh_std)

    def estimator_model(self) -> GasGenModel:
        """Model the estimators use; reduced under coupled degradation."""
        m = self.truth_model()
        if self.degradation.mode == "coupled":
            pairs = [tuple(p) for p in self.degradation.pairs]
            m = couple_health(m, pairs, [self.degradation.k_c, self.degradation.k_t][:len(pairs)])
        return m

    def profile_std(self, pe_ss: float) -> float:
        """Nominal std of the shaft-power deviation profile."""
        amp = self.load.amplitude_pct / 100.0 * pe_ss
        jit = self.load.jitter_pct / 100.0 * pe_ss
        return math.sqrt(amp ** 2 / 3.0 + jit ** 2)

    def pe_variance(self, pe_ss: float) -> float:
        return (self.load.estimate_noise_pct / 100.0 * pe_ss) ** 2

    def pPeT_value(self, pe_ss: float) -> float:
        if self.estimator.pPeT is not None:
            return float(self.estimator.pPeT)
        return (self.estimator.pPeT_std_multiple * self.profile_std(pe_ss)) ** 2

    # ------------------------------------------------------------ (de)serialise
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> "ScenarioConfig":
        data = dict(data)
        nested = {"load": LoadConfig, "degradation": DegradationConfig,
                  "estimator": EstimatorSettings, "controller": ControllerConfig}
        kwargs = {}
        known = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in data.items():
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                kwargs[key] = sub(**value)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.base_dir = None if base_dir is None else str(base_dir)
        return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return ScenarioConfig.from_dict(data, base_dir=path.parent).validate()


def builtin_case(name: str) -> ScenarioConfig:
    """Load one of the shipped case files (``case1``, ``case2``, ``case3``)."""
    ref = resources.files("apu_fdi.data.cases").joinpath(f"{name}.json")
    with resources.as_file(ref) as p:
        return load_config(p)
