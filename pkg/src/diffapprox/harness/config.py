"""Strict JSON experiment configuration."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ..dynamics import IntegratorConfig
from ..errors import ConfigurationError
from ..functions import CoefficientSet, boundedness_lint, parse_expr
from ..homogenize import FrozenModel, InvariantSamplerConfig, PoissonConfig
from ..noise import NoiseSpec
from ..spectral import OperatorSpec, project_function
from .functionals import Functional, make_functional

SCHEMA = {
    "name": None,
    "operator": {"domain_length", "n_modes", "eigenvalues", "n_grid"},
    "coefficients": {"f", "b", "g", "sigma"},
    "noises": {"W1", "W2", "Wtilde"},
    "initial": {"x0", "y0"},
    "epsilons": None,
    "T": None,
    "integrator": {"dt_ratio", "micro_substeps_per_eps", "thinning", "blowup_threshold"},
    "limit": {"dt", "provider", "k_reuse", "sqrt_method", "n_paths"},
    "sampler": {"burn_in", "n_samples", "thinning", "n_paths", "dt"},
    "poisson": {"T_cut", "n_time_nodes", "n_paths", "fd_step", "max_solves"},
    "functional": {"name", "params"},
    "seed": None,
    "n_paths": None,
    "chunk_size": None,
    "output": None,
    "validation": {"vartheta", "gamma", "T", "lint"},
    "moment_scan": {"gammas", "epsilons", "n_paths", "spread_threshold"},
    "acceptance": {"slope_band"},
    "states": None,
    "poisson_check": {"y", "n_surrogate_points"},
    "metadata": None,
}

REQUIRED = ("operator", "coefficients", "noises", "initial", "epsilons", "T", "functional")


def _check_keys(section: str, data, allowed):
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {section!r} must be an object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _initial_field(spec, op: OperatorSpec, name: str):
    """Coefficient list, or {"expr": "..."} in the variable xi projected onto the basis."""
    if isinstance(spec, dict):
        _check_keys(f"initial.{name}", spec, {"expr"})
        fn = parse_expr(spec["expr"], variables=("xi",))
        warnings = boundedness_lint(fn)
        field = project_function(lambda xi: fn.eval(xi), op)
        return field, warnings
    arr = np.zeros(op.n_modes)
    vals = np.asarray(spec, dtype=float)
    if vals.ndim != 1 or vals.size > op.n_modes:
        raise ConfigurationError(f"initial {name} must list at most {op.n_modes} coefficients")
    arr[: vals.size] = vals
    return op.field(arr), []


@dataclass
class ExperimentConfig:
    raw: dict
    op: OperatorSpec
    coeffs: CoefficientSet
    noise1: NoiseSpec
    noise2: NoiseSpec
    noise_tilde: NoiseSpec
    x0: object
    y0: object
    epsilons: tuple
    T: float
    functional: Functional
    seed: int
    n_paths: int
    limit_paths: int
    chunk_size: int
    dt_ratio: float
    micro_substeps_per_eps: int | None
    thinning: int
    blowup_threshold: float
    limit_dt: float | None
    provider: str
    k_reuse: int
    sqrt_method: str
    sampler: InvariantSamplerConfig
    poisson: PoissonConfig
    init_warnings: list

    @property
    def name(self) -> str:
        return self.raw.get("name", "experiment")

    @property
    def model(self) -> FrozenModel:
        return FrozenModel(self.op, self.coeffs, self.noise2)

    def integrator(self, epsilon: float, step_multiple: int = 1) -> IntegratorConfig:
        return IntegratorConfig.for_epsilon(
            epsilon, self.T, self.dt_ratio, step_multiple=step_multiple,
            micro_substeps_per_eps=self.micro_substeps_per_eps, thinning=self.thinning,
            blowup_threshold=self.blowup_threshold,
        )

    def resolved_limit_dt(self) -> float:
        """Explicit limit step, or the macro step used at the smallest epsilon."""
        if self.limit_dt is not None:
            return self.limit_dt
        return self.integrator(min(self.epsilons)).dt_macro

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name) or {})

    def resolved(self) -> dict:
        """Configuration with every default filled in; re-running it reproduces the results."""
        out = copy.deepcopy(self.raw)
        out["seed"] = self.seed
        out["n_paths"] = self.n_paths
        out["chunk_size"] = self.chunk_size
        out.setdefault("limit", {})
        out["limit"].update({
            "dt": self.resolved_limit_dt(), "provider": self.provider, "k_reuse": self.k_reuse,
            "sqrt_method": self.sqrt_method, "n_paths": self.limit_paths,
        })
        out["integrator"] = {
            "dt_ratio": self.dt_ratio, "micro_substeps_per_eps": self.micro_substeps_per_eps,
            "thinning": self.thinning, "blowup_threshold": self.blowup_threshold,
        }
        return out

    def with_overrides(self, **kw) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw.update(kw)
        return parse_config(raw)


def parse_config(data: dict) -> ExperimentConfig:
    _check_keys("config", data, SCHEMA)
    for key in REQUIRED:
        if key not in data:
            raise ConfigurationError(f"missing required key {key!r}")
    for key, allowed in SCHEMA.items():
        if allowed is not None and data.get(key) is not None:
            _check_keys(key, data[key], allowed)

    o = data["operator"]
    op = OperatorSpec(float(o["domain_length"]), int(o["n_modes"]), o.get("eigenvalues"), o.get("n_grid"))
    coeffs = CoefficientSet.from_strings(**{k: str(v) for k, v in data["coefficients"].items()})
    noises = data["noises"]
    if "W1" not in noises or "W2" not in noises:
        raise ConfigurationError("noises must define W1 and W2")
    n1 = NoiseSpec.from_config(noises["W1"], op.n_modes, "W1")
    n2 = NoiseSpec.from_config(noises["W2"], op.n_modes, "W2")
    nt = NoiseSpec.from_config(noises["Wtilde"], op.n_modes, "Wtilde") if "Wtilde" in noises else NoiseSpec.cylindrical(op.n_modes)

    init = data["initial"]
    x0, wx = _initial_field(init.get("x0", []), op, "x0")
    y0, wy = _initial_field(init.get("y0", []), op, "y0")

    eps = tuple(float(e) for e in data["epsilons"])
    if not eps:
        raise ConfigurationError("epsilon grid is empty")
    if any(not 0 < e <= 1 for e in eps):
        raise ConfigurationError("every epsilon must lie in (0, 1]")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ConfigurationError("epsilon grid must be strictly decreasing")
    T = float(data["T"])
    if not T > 0:
        raise ConfigurationError("T must be positive")

    fn = data["functional"]
    functional = make_functional(fn["name"], fn.get("params") or {}, op.n_modes)

    integ = data.get("integrator") or {}
    lim = data.get("limit") or {}
    provider = lim.get("provider", "analytic")
    if provider not in ("analytic", "monte-carlo"):
        raise ConfigurationError(f"unknown provider {provider!r}")
    sqrt_method = lim.get("sqrt_method", "principal")
    if sqrt_method not in ("principal", "cholesky"):
        raise ConfigurationError(f"unknown sqrt_method {sqrt_method!r}")
    n_paths = int(data.get("n_paths", 10000))
    seed = int(data.get("seed", 0))
    if not 0 <= seed < 2**64:
        raise ConfigurationError("seed must be an unsigned 64-bit integer")
    return ExperimentConfig(
        raw=copy.deepcopy(data),
        op=op,
        coeffs=coeffs,
        noise1=n1,
        noise2=n2,
        noise_tilde=nt,
        x0=x0,
        y0=y0,
        epsilons=eps,
        T=T,
        functional=functional,
        seed=seed,
        n_paths=n_paths,
        limit_paths=int(lim.get("n_paths") or n_paths),
        chunk_size=int(data.get("chunk_size", 4096)),
        dt_ratio=float(integ.get("dt_ratio", 50.0)),
        micro_substeps_per_eps=integ.get("micro_substeps_per_eps"),
        thinning=int(integ.get("thinning", 10)),
        blowup_threshold=float(integ.get("blowup_threshold", 1e10)),
        limit_dt=None if lim.get("dt") is None else float(lim["dt"]),
        provider=provider,
        k_reuse=int(lim.get("k_reuse", 5)),
        sqrt_method=sqrt_method,
        sampler=InvariantSamplerConfig(**(data.get("sampler") or {})),
        poisson=PoissonConfig(**(data.get("poisson") or {})),
        init_warnings=wx + wy,
    )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data)


def default_config_path(name: str) -> Path:
    return Path(str(resources.files("diffapprox.harness") / "configs" / f"{name}.json"))


def default_config(name: str = "linear_benchmark", **overrides) -> ExperimentConfig:
    data = json.loads(default_config_path(name).read_text())
    data.update(overrides)
    return parse_config(data)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")
