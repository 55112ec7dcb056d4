"""Experiment runners: weak-error sweeps, moment scans, validation, averaging and Poisson checks."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import _parallel
from ..dynamics import record_times, simulate_ensemble
from ..errors import CenteringError, ConfigurationError, DomainError
from ..homogenize import (
    b_observable,
    check_centering,
    check_poisson_residual,
    closed_form_centering,
    estimate_homogenized,
    poisson_surrogate,
    solve_poisson,
    state_hash,
)
from ..limit import LimitConfig, MonteCarloProvider, linear_fast_provider, simulate_limit_ensemble
from ..noise import check_lambda_integrability, check_radonifying, check_trace, derive_seed
from ..spectral import SpectralField
from .config import ExperimentConfig
from .rates import RateFit, fit_rate, inconclusive

CSV_COLUMNS = ("eps", "slow_mean", "slow_stderr", "limit_mean", "limit_stderr", "weak_error", "weak_stderr")
CSV_SCHEMA = "weak-error/v1"

SEED_SLOW, SEED_LIMIT, SEED_CENTER, SEED_AVG, SEED_POISSON = 100, 200, 300, 400, 500


def _eps_word(eps: float) -> int:
    return int(round(eps * 1e9))


def build_provider(cfg: ExperimentConfig):
    if cfg.provider == "analytic":
        return linear_fast_provider(cfg.op, cfg.coeffs, cfg.noise2, sqrt_method=cfg.sqrt_method)
    return MonteCarloProvider(cfg.model, cfg.sampler, cfg.poisson, cfg.k_reuse, cfg.sqrt_method)


def limit_config(cfg: ExperimentConfig, dt: float | None = None) -> LimitConfig:
    return LimitConfig(dt or cfg.resolved_limit_dt(), cfg.T, cfg.noise1, cfg.noise_tilde, cfg.thinning)


def require_centering(cfg: ExperimentConfig, x=None):
    """Hard gate: the oscillating drift must average to zero under the frozen law."""
    if cfg.coeffs.b.is_zero:
        return None
    x = cfg.x0 if x is None else x
    res = check_centering(cfg.model, x, cfg.coeffs.b, cfg.sampler, derive_seed(cfg.seed, SEED_CENTER))
    if not res.passed:
        raise CenteringError(res.residual, res.stderr)
    return res


# --------------------------------------------------------------------------
# weak error


@dataclass
class WeakErrorRow:
    eps: float
    slow_mean: float
    slow_stderr: float
    limit_mean: float
    limit_stderr: float
    weak_error: float
    weak_stderr: float
    time: float | None = None

    def values(self):
        return tuple(getattr(self, c) for c in CSV_COLUMNS)

    @property
    def significant(self) -> bool:
        return self.weak_error > 3 * self.weak_stderr


@dataclass
class WeakErrorReport:
    rows: list
    fit: RateFit
    status: str
    slope_band: tuple | None = None
    centering: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def in_band(self) -> bool | None:
        if self.slope_band is None or self.fit.slope is None:
            return None
        lo, hi = self.slope_band
        return lo <= self.fit.slope <= hi

    def to_csv(self) -> str:
        lines = [f"# schema={CSV_SCHEMA}", ",".join(CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(repr(float(v)) for v in r.values()))
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {
            "schema": CSV_SCHEMA,
            "rows": [dict(zip(CSV_COLUMNS, map(float, r.values()))) for r in self.rows],
            "fit": self.fit.as_dict(),
            "status": self.status,
            "slope_band": None if self.slope_band is None else list(self.slope_band),
            "in_band": self.in_band,
            "centering": self.centering,
        }


def _mean_se(values: np.ndarray):
    n = values.shape[0]
    se = np.std(values, axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(values.shape[1:], np.nan)
    return values.mean(axis=0), se


def slow_expectation(cfg: ExperimentConfig, eps: float, n_check_times: int = 1, threads=None):
    """``E[phi(X_t^eps)]`` at ``t = T k / n_check_times`` with standard errors."""
    integ = cfg.integrator(eps, step_multiple=n_check_times)
    every = integ.n_steps // n_check_times
    phi = cfg.functional
    _, _, recs = simulate_ensemble(
        cfg.op, cfg.coeffs, cfg.noise1, cfg.noise2, integ, cfg.x0.coeffs, cfg.y0.coeffs,
        derive_seed(cfg.seed, SEED_SLOW, _eps_word(eps)), np.arange(cfg.n_paths),
        record=lambda X, Y: phi(X), every=every, chunk_size=cfg.chunk_size, threads=threads,
    )
    return _mean_se(recs[1:].T)


def limit_expectation(cfg: ExperimentConfig, provider=None, n_check_times: int = 1, threads=None, dt=None):
    lcfg = limit_config(cfg, dt)
    n = lcfg.n_steps
    if n % n_check_times:
        raise ConfigurationError("limit step count must be divisible by the number of check times")
    provider = build_provider(cfg) if provider is None else provider
    phi = cfg.functional
    _, recs = simulate_limit_ensemble(
        cfg.op, provider, lcfg, cfg.x0.coeffs, derive_seed(cfg.seed, SEED_LIMIT), np.arange(cfg.limit_paths),
        record=phi, every=n // n_check_times, chunk_size=cfg.chunk_size, threads=threads,
    )
    return _mean_se(recs[1:].T)


def run_weak_error(cfg: ExperimentConfig, n_check_times: int = 1, threads=None, progress=None) -> WeakErrorReport:
    """Weak error per epsilon and the fitted log-log rate.

    With ``n_check_times > 1`` each row reports the time in
    ``{T/k, 2T/k, ..., T}`` where the error is largest.
    """
    cen = require_centering(cfg)
    centering = None if cen is None else {"residual": cen.residual.tolist(), "stderr": cen.stderr.tolist()}
    lim_mean, lim_se = limit_expectation(cfg, n_check_times=n_check_times, threads=threads)
    rows = []
    for eps in cfg.epsilons:
        s_mean, s_se = slow_expectation(cfg, eps, n_check_times, threads)
        err = np.abs(s_mean - lim_mean)
        comb = np.hypot(s_se, lim_se)
        j = int(np.argmax(err))
        t = cfg.T * (j + 1) / n_check_times
        rows.append(WeakErrorRow(eps, float(s_mean[j]), float(s_se[j]), float(lim_mean[j]), float(lim_se[j]),
                                 float(err[j]), float(comb[j]), t))
        if progress:
            progress(rows[-1])
    band = (cfg.raw.get("acceptance") or {}).get("slope_band")
    band = None if band is None else tuple(float(b) for b in band)
    if all(r.significant for r in rows):
        fit = fit_rate([(r.eps, r.weak_error, r.weak_stderr) for r in rows])
        status = "fitted" if fit.conclusive else "inconclusive"
    else:
        weak = [r.eps for r in rows if not r.significant]
        fit = inconclusive(len(rows), f"weak error below 3 stderr at eps={weak}")
        status = "inconclusive"
    return WeakErrorReport(rows, fit, status, band, centering)


# --------------------------------------------------------------------------
# moment scan


@dataclass
class MomentRow:
    gamma: float
    eps: float
    t: float
    slow_moment: float
    slow_stderr: float
    fast_moment: float
    fast_stderr: float


@dataclass
class MomentScan:
    rows: list
    spreads: dict
    flags: dict
    fast_spread: float
    threshold: float

    def as_dict(self):
        return {
            "rows": [r.__dict__ for r in self.rows],
            "spreads": {str(k): v for k, v in self.spreads.items()},
            "flags": {str(k): v for k, v in self.flags.items()},
            "fast_spread": self.fast_spread,
            "threshold": self.threshold,
        }

    def to_csv(self) -> str:
        cols = ("gamma", "eps", "t", "slow_moment", "slow_stderr", "fast_moment", "fast_stderr")
        lines = ["# schema=moment-scan/v1", ",".join(cols)]
        for r in self.rows:
            lines.append(",".join(repr(float(getattr(r, c))) for c in cols))
        return "\n".join(lines) + "\n"


def _spread(values) -> float:
    values = np.asarray(values, dtype=float)
    lo = float(np.min(values))
    return math.inf if lo <= 0 else float((np.max(values) - lo) / lo)


def run_moment_scan(cfg: ExperimentConfig, gammas=None, epsilons=None, n_paths=None, threshold=None,
                    threads=None) -> MomentScan:
    """``E||(-A)^gamma X_t||^2`` and ``E||Y_t||^2`` at t in {T/4, T/2, T} across epsilon.

    ``spreads[gamma]`` is the largest relative spread (max - min) / min over the
    three times.  A gamma is flagged ``growing`` when that spread exceeds the
    threshold and the moment increases as epsilon decreases; gamma >= 1/2 is
    tagged ``outside-range``.
    """
    sec = cfg.section("moment_scan")
    gammas = tuple(gammas if gammas is not None else sec.get("gammas", [0.25, 0.75]))
    epsilons = tuple(epsilons if epsilons is not None else sec.get("epsilons", cfg.epsilons))
    n_paths = int(n_paths if n_paths is not None else sec.get("n_paths", cfg.n_paths))
    threshold = float(threshold if threshold is not None else sec.get("spread_threshold", 0.25))
    for g in gammas:
        if g < 0:
            raise DomainError("gamma must be non-negative")
    alpha = cfg.op.alpha
    weights = np.stack([alpha ** (2 * g) for g in gammas])

    def record(X, Y):
        return np.column_stack([(X**2) @ weights.T, np.sum(Y**2, axis=1)])

    table = {}
    rows = []
    for eps in epsilons:
        integ = cfg.integrator(eps, step_multiple=4)
        every = integ.n_steps // 4
        _, _, recs = simulate_ensemble(
            cfg.op, cfg.coeffs, cfg.noise1, cfg.noise2, integ, cfg.x0.coeffs, cfg.y0.coeffs,
            derive_seed(cfg.seed, SEED_SLOW, _eps_word(eps)), np.arange(n_paths),
            record=record, every=every, chunk_size=cfg.chunk_size, threads=threads,
        )
        picks = {cfg.T / 4: 1, cfg.T / 2: 2, cfg.T: 4}
        for t, idx in picks.items():
            mean, se = _mean_se(recs[idx])
            for gi, g in enumerate(gammas):
                rows.append(MomentRow(g, eps, t, float(mean[gi]), float(se[gi]), float(mean[-1]), float(se[-1])))
                table[(g, eps, t)] = (float(mean[gi]), float(mean[-1]))
    times = (cfg.T / 4, cfg.T / 2, cfg.T)
    spreads, flags = {}, {}
    eps_sorted = sorted(epsilons, reverse=True)
    for g in gammas:
        sp = max(_spread([table[(g, e, t)][0] for e in epsilons]) for t in times)
        spreads[g] = sp
        increasing = any(table[(g, eps_sorted[-1], t)][0] > table[(g, eps_sorted[0], t)][0] for t in times)
        tags = []
        if sp > threshold and increasing:
            tags.append("growing")
        if g >= 0.5:
            tags.append("outside-range")
        flags[g] = tags
    fast_spread = max(_spread([table[(gammas[0], e, t)][1] for e in epsilons]) for t in times)
    return MomentScan(rows, spreads, flags, fast_spread, threshold)


# --------------------------------------------------------------------------
# validation


def _status(ok: bool, warn: bool = False) -> str:
    return "pass" if ok and not warn else ("warn" if ok else "fail")


def validate_config(cfg: ExperimentConfig) -> dict:
    """Pass/warn/fail per standing assumption, with the computed numbers."""
    v = cfg.section("validation")
    gamma = float(v.get("gamma", 0.25))
    T_val = float(v.get("T", cfg.T))
    vartheta = float(v.get("vartheta", 1.0))
    checks = []

    for name, spec in (("W1", cfg.noise1), ("W2", cfg.noise2)):
        tr = check_trace(spec)
        checks.append({
            "check": f"trace_{name}", "status": _status(tr.trace_class),
            "partial_sum": tr.partial_sum, "tail_bound": tr.tail_bound,
            "decay_exponent": tr.decay_exponent, "message": tr.message,
        })
    for name, spec in (("W1", cfg.noise1), ("W2", cfg.noise2)):
        try:
            rad = check_radonifying(cfg.op, spec, gamma, T_val)
            checks.append({
                "check": f"radonifying_{name}", "status": _status(rad.finite), "gamma": gamma,
                "value": rad.value, "tail_exponent": rad.tail_exponent,
            })
        except DomainError as exc:
            checks.append({"check": f"radonifying_{name}", "status": "fail", "message": str(exc)})
    lam = check_lambda_integrability(cfg.op, cfg.noise2, vartheta, T_val)
    checks.append({
        "check": "lambda_integrability", "status": _status(not lam.divergent), "vartheta": vartheta,
        "integral": lam.integral, "small_t_exponent": lam.small_t_exponent,
        "integrand_exponent": lam.integrand_exponent,
    })
    margin = cfg.model.margin
    checks.append({"check": "dissipativity", "status": _status(margin > 0), "margin": margin})
    if cfg.coeffs.b.is_zero:
        checks.append({"check": "centering", "status": "pass", "residual": [0.0] * cfg.op.n_modes,
                       "message": "b is identically zero"})
    elif margin > 0:
        res = closed_form_centering(cfg.model, cfg.x0, cfg.coeffs.b)
        method = "gaussian-quadrature"
        if res is None:
            res = check_centering(cfg.model, cfg.x0, cfg.coeffs.b, cfg.sampler, derive_seed(cfg.seed, SEED_CENTER))
            method = "monte-carlo"
        checks.append({
            "check": "centering", "status": _status(res.passed), "method": method,
            "residual": res.residual.tolist(), "stderr": res.stderr.tolist(),
        })
    else:
        checks.append({"check": "centering", "status": "fail", "message": "frozen dynamics not dissipative"})
    lint = {k: m for k, m in cfg.coeffs.lint().items() if m}
    if cfg.init_warnings:
        lint["initial"] = cfg.init_warnings
    checks.append({"check": "boundedness_lint", "status": "warn" if lint else "pass", "warnings": lint})
    if max(cfg.epsilons) >= 1:
        checks.append({"check": "scale_separation", "status": "warn", "message": "epsilon >= 1: no scale separation"})
    statuses = [c["status"] for c in checks]
    overall = "fail" if "fail" in statuses else ("warn" if "warn" in statuses else "pass")
    return {"overall": overall, "checks": checks}


def check_status(report: dict, name: str) -> str:
    for c in report["checks"]:
        if c["check"] == name:
            return c["status"]
    raise KeyError(name)


# --------------------------------------------------------------------------
# averaging and Poisson checks


def run_average(cfg: ExperimentConfig, states=None) -> list[dict]:
    """Monte Carlo homogenized coefficients at each slow state (default: x0)."""
    states = states if states is not None else cfg.raw.get("states") or [cfg.x0.coeffs.tolist()]
    records = []
    conf = {"sampler": cfg.section("sampler"), "poisson": cfg.section("poisson"), "seed": cfg.seed}
    for i, s in enumerate(states):
        arr = np.zeros(cfg.op.n_modes)
        arr[: len(s)] = s
        x = SpectralField(arr, cfg.op)
        hc = estimate_homogenized(cfg.model, x, cfg.sampler, cfg.poisson, derive_seed(cfg.seed, SEED_AVG, i))
        records.extend(hc.to_records(arr, conf))
    return records


def run_poisson_check(cfg: ExperimentConfig) -> dict:
    """Monte Carlo Poisson solution for phi = B at (x0, y) and generator residuals."""
    sec = cfg.section("poisson_check")
    y = np.zeros(cfg.op.n_modes)
    yv = sec.get("y", cfg.y0.coeffs.tolist())
    y[: len(yv)] = yv
    yf = SpectralField(y, cfg.op)
    model = cfg.model
    phi = b_observable(model)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = solve_poisson(model, cfg.x0, yf, phi, cfg.poisson, derive_seed(cfg.seed, SEED_POISSON),
                            sampler=cfg.sampler, centering_fn=cfg.coeffs.b)
    out = {
        "state_hash": state_hash(cfg.x0),
        "y": y.tolist(),
        "psi": res.value.tolist(),
        "stderr": res.stderr.tolist(),
        "tail_bound": res.tail_bound.tolist(),
        "T_cut": res.T_cut,
        "warnings": [str(w.message) for w in caught],
    }
    b_val = phi(cfg.x0.coeffs[None, :], y[None, :])[0]
    c_neg = cfg.coeffs.g.linear_coefficient("v")
    beta = cfg.coeffs.b.linear_coefficient("v")
    if c_neg is not None and c_neg < 0 and beta is not None:
        K = beta / (cfg.op.alpha - c_neg)

        def psi_exact(yy):
            return K * yy

        out["psi_analytic"] = psi_exact(y).tolist()
        out["residual_analytic"] = check_poisson_residual(model, cfg.x0, y, psi_exact, b_val, cfg.poisson.fd_step)
    n_pts = int(sec.get("n_surrogate_points", 16))
    surrogate = poisson_surrogate(model, cfg.x0, phi, cfg.sampler, cfg.poisson,
                                  derive_seed(cfg.seed, SEED_POISSON, 1), n_pts)
    out["residual_surrogate"] = check_poisson_residual(model, cfg.x0, y, surrogate, b_val, cfg.poisson.fd_step)
    out["surrogate_note"] = "affine surrogate fitted to Monte Carlo solves (exact only for linear models)"
    return out


def run_simulate(cfg: ExperimentConfig, threads=None) -> list[dict]:
    """Ensemble summaries of the slow-fast system along the thinned time grid for every epsilon."""
    phi = cfg.functional
    rows = []
    for eps in cfg.epsilons:
        integ = cfg.integrator(eps)

        def record(X, Y):
            return np.column_stack([phi(X), np.sum(X**2, axis=1), np.sum(Y**2, axis=1)])

        _, _, recs = simulate_ensemble(
            cfg.op, cfg.coeffs, cfg.noise1, cfg.noise2, integ, cfg.x0.coeffs, cfg.y0.coeffs,
            derive_seed(cfg.seed, SEED_SLOW, _eps_word(eps)), np.arange(cfg.n_paths),
            record=record, chunk_size=cfg.chunk_size, threads=threads,
        )
        for t, r in zip(record_times(integ, integ.thinning), recs):
            mean, se = _mean_se(r)
            rows.append({"eps": eps, "t": float(t), "phi_mean": float(mean[0]), "phi_stderr": float(se[0]),
                         "x_sq_mean": float(mean[1]), "y_sq_mean": float(mean[2])})
    return rows


def set_threads(n: int | None):
    if n is not None:
        _parallel.set_threads(n)

