"""Invariant-measure averages of the frozen process and the Poisson corrector.

All estimators run independent frozen chains (never one long chain), so the
reported standard errors are between-chain statistics.  Poisson solutions
use the time-integral representation

    Psi(x, y) = int_0^inf E[phi(x, Y_t^x(y))] dt

with a trapezoidal rule on ``[0, T_cut]``.  Averages of the form
``E_mu[B (x) Psi]`` and ``E_mu[D_x Psi . B]`` subtract a reference solve
started at ``y = 0`` that shares its noise with the sample's own solve;
under the centering condition the reference term averages to zero, so the
subtraction removes the common noise without introducing bias.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _parallel
from .dynamics import FrozenSystem
from .errors import CenteringError, ConfigurationError, PSDError
from .functions import CoefficientSet, multiplier_matrix, nemytskii_spectral, sup_derivative
from .noise import NoiseSpec, derive_seed
from .spectral import OperatorSpec, SpectralField


class LowAccuracyWarning(UserWarning):
    pass


class PoissonTailWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FrozenModel:
    """Everything that defines the frozen fast dynamics."""

    op: OperatorSpec
    coeffs: CoefficientSet
    noise2: NoiseSpec

    @property
    def g_sup_slope(self) -> float:
        g = self.coeffs.g
        return 0.0 if g.is_constant else sup_derivative(g, "v")

    @property
    def margin(self) -> float:
        """Lower bound ``alpha_1 - sup d_v g`` on the exponential mixing rate."""
        return float(self.op.alpha[0] - self.g_sup_slope)

    def require_dissipative(self):
        m = self.margin
        if not m > 0:
            raise ConfigurationError(
                f"frozen dynamics not dissipative: alpha_1 - sup d_v g = {m:.4g} <= 0"
            )
        return m


@dataclass(frozen=True)
class InvariantSamplerConfig:
    burn_in: float | None = None
    n_samples: int = 500
    thinning: float = 1.0
    n_paths: int = 64
    dt: float = 0.005

    def resolved_burn_in(self, op: OperatorSpec) -> float:
        return 5.0 / op.alpha[0] if self.burn_in is None else float(self.burn_in)

    def validate(self, op: OperatorSpec, for_estimator: bool = True):
        if self.n_paths < 2:
            raise ConfigurationError("need at least two chains for a between-chain stderr")
        if for_estimator and self.n_samples * self.n_paths < 1000:
            warnings.warn("fewer than 1000 invariant samples", LowAccuracyWarning, stacklevel=3)
        if self.thinning < self.dt:
            raise ConfigurationError("thinning must be at least one time step")


@dataclass(frozen=True)
class PoissonConfig:
    T_cut: float | None = None
    n_time_nodes: int = 2001
    n_paths: int = 1000
    fd_step: float = 1e-2
    max_solves: int = 50_000_000

    def resolved_T_cut(self, model: FrozenModel) -> float:
        if self.T_cut is not None:
            return float(self.T_cut)
        return 8.0 / model.margin

    def dt(self, model: FrozenModel) -> float:
        return self.resolved_T_cut(model) / (self.n_time_nodes - 1)

    def validate(self):
        if not 1e-4 <= self.fd_step <= 1e-1:
            raise ConfigurationError("fd_step must lie in [1e-4, 1e-1]")
        if self.n_time_nodes < 3:
            raise ConfigurationError("need at least three quadrature nodes")


def _chain_stderr(per_chain: np.ndarray) -> np.ndarray:
    """Standard error of the grand mean from per-chain means (axis 0)."""
    n = per_chain.shape[0]
    if n < 2:
        return np.full(per_chain.shape[1:], np.nan)
    return np.std(per_chain, axis=0, ddof=1) / math.sqrt(n)


# --------------------------------------------------------------------------
# invariant sampling


def sample_invariant(model: FrozenModel, x: SpectralField, cfg: InvariantSamplerConfig, seed: int,
                     y0=None) -> np.ndarray:
    """Samples of mu^x, array (n_chains, n_samples, n_modes)."""
    model.require_dissipative()
    cfg.validate(model.op, for_estimator=False)
    op = model.op
    system = FrozenSystem(op, model.coeffs.g, model.noise2, cfg.dt)
    burn = int(math.ceil(cfg.resolved_burn_in(op) / cfg.dt - 1e-9))
    thin = max(1, int(round(cfg.thinning / cfg.dt)))
    chains = np.arange(cfg.n_paths)
    chain_seed = derive_seed(seed, 1)
    Xg = op.to_grid_array(np.asarray(x.coeffs)[None, :])
    Y = np.zeros((cfg.n_paths, op.n_modes)) if y0 is None else np.broadcast_to(y0, (cfg.n_paths, op.n_modes)).copy()
    out = np.empty((cfg.n_paths, cfg.n_samples, op.n_modes))
    step = 0
    for _ in range(burn):
        Y = system.step(Y, Xg, step, chain_seed, chains)
        step += 1
    system.check(Y, step * cfg.dt, chains)
    for s in range(cfg.n_samples):
        for _ in range(thin):
            Y = system.step(Y, Xg, step, chain_seed, chains)
            step += 1
        out[:, s] = Y
    system.check(out.reshape(-1, op.n_modes), step * cfg.dt, np.repeat(chains, cfg.n_samples))
    return out


def _average(values: np.ndarray):
    """Grand mean and between-chain stderr for values of shape (chains, samples, ...)."""
    per_chain = values.mean(axis=1)
    mean = per_chain.mean(axis=0)
    return mean, _chain_stderr(per_chain)


def _warn_accuracy(value, stderr, what):
    v = np.linalg.norm(np.atleast_1d(value))
    s = np.linalg.norm(np.atleast_1d(stderr))
    if v > 0 and s > 0.5 * v:
        warnings.warn(f"{what}: stderr {s:.3g} exceeds 50% of value {v:.3g}", LowAccuracyWarning, stacklevel=3)


def estimate_invariant_expectation(model: FrozenModel, x: SpectralField, observable, cfg: InvariantSamplerConfig,
                                   seed: int, samples: np.ndarray | None = None, warn: bool = True):
    """``int observable(y) mu^x(dy)`` with its between-chain stderr.

    ``observable`` maps an array of states (M, n_modes) to an array (M, ...).
    """
    if samples is None:
        samples = sample_invariant(model, x, cfg, seed)
    C, S, n = samples.shape
    vals = np.asarray(observable(samples.reshape(C * S, n)), dtype=float)
    vals = np.broadcast_to(vals, (C * S,) + vals.shape[1:]) if vals.ndim else np.full(C * S, float(vals))
    vals = vals.reshape((C, S) + vals.shape[1:])
    mean, se = _average(vals)
    if warn:
        _warn_accuracy(mean, se, "invariant expectation")
    return mean, se


def _xrep(x: SpectralField, m: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(x.coeffs), (m, x.op.n_modes))


def estimate_Fbar(model: FrozenModel, x: SpectralField, cfg: InvariantSamplerConfig, seed: int, samples=None):
    op, f = model.op, model.coeffs.f
    if not f.depends_on("v"):
        value = nemytskii_spectral(f, op, np.asarray(x.coeffs)[None, :], np.zeros((1, op.n_modes)))[0]
        return SpectralField(value, op), np.zeros(op.n_modes)
    mean, se = estimate_invariant_expectation(
        model, x, lambda Y: nemytskii_spectral(f, op, _xrep(x, len(Y)), Y), cfg, seed, samples
    )
    return SpectralField(mean, op), se


def estimate_SigmaBarSq(model: FrozenModel, x: SpectralField, cfg: InvariantSamplerConfig, seed: int, samples=None):
    """Matrix of ``E_mu <Sigma(x,y) e_j, Sigma(x,y) e_k>`` via grid quadrature."""
    op, sig = model.op, model.coeffs.sigma
    n = op.n_modes
    if not sig.depends_on("v"):
        s = sig.eval(op.to_grid_array(np.asarray(x.coeffs)), np.zeros(op.n_grid))
        return multiplier_matrix(np.asarray(s) ** 2, op), np.zeros((n, n))

    def gram(Y):
        s = sig.eval(op.to_grid_array(_xrep(x, len(Y))), op.to_grid_array(Y))
        return multiplier_matrix(s**2, op)

    return estimate_invariant_expectation(model, x, gram, cfg, seed, samples)


@dataclass
class CenteringResult:
    residual: np.ndarray
    stderr: np.ndarray
    passed: bool

    @property
    def max_z(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(self.residual) / self.stderr
        z = np.where(self.residual == 0, 0.0, z)
        return float(np.max(z))


def check_centering(model: FrozenModel, x: SpectralField, fn, cfg: InvariantSamplerConfig, seed: int,
                    samples=None) -> CenteringResult:
    """Invariant mean of the Nemytskii image of ``fn``; passes iff every mode is within 3 stderr of 0."""
    op = model.op
    n = op.n_modes
    if fn.is_zero:
        return CenteringResult(np.zeros(n), np.zeros(n), True)
    # a centered observable is expected to be small relative to its stderr
    mean, se = estimate_invariant_expectation(
        model, x, lambda Y: nemytskii_spectral(fn, op, _xrep(x, len(Y)), Y), cfg, seed, samples, warn=False
    )
    passed = bool(np.all(np.abs(mean) <= 3 * se))
    return CenteringResult(mean, se, passed)


def gaussian_grid_variance(model: FrozenModel) -> np.ndarray | None:
    """Pointwise variance of the frozen law on the grid when ``g = -c v`` (else None).

    The law is then the centered Gaussian with mode variances
    ``lambda_k / (2 (alpha_k + c))``, independent of the slow state.
    """
    c_neg = model.coeffs.g.linear_coefficient("v")
    if c_neg is None or not c_neg < 0:
        return None
    op = model.op
    cov = model.noise2.eigenvalues / (2.0 * (op.alpha - c_neg))
    return (op.synthesis_matrix**2) @ cov


def gauss_hermite_average(fn, Xg: np.ndarray, var: np.ndarray, n_nodes: int = 40) -> np.ndarray:
    """Pointwise ``E[fn(x(xi), Z)]`` with ``Z ~ N(0, var(xi))`` on the grid."""
    t, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / w.sum()
    sd = np.sqrt(var)
    out = 0.0
    for ti, wi in zip(t, w):
        out = out + wi * fn.eval(Xg, np.broadcast_to(ti * sd, Xg.shape))
    return np.asarray(out, dtype=float)


def closed_form_centering(model: FrozenModel, x: SpectralField, fn, tol: float = 1e-10):
    """Exact invariant mean of the Nemytskii image of ``fn`` under a Gaussian frozen law.

    Returns a CenteringResult with zero stderr, or None when the law is not Gaussian.
    """
    var = gaussian_grid_variance(model)
    if var is None:
        return None
    op = model.op
    n = op.n_modes
    if fn.is_zero:
        return CenteringResult(np.zeros(n), np.zeros(n), True)
    Xg = op.to_grid_array(np.asarray(x.coeffs)[None, :])
    resid = op.to_spectral_array(gauss_hermite_average(fn, Xg, var[None, :]))[0]
    probe = np.concatenate([fn.eval(Xg, k * np.sqrt(var)[None, :]) for k in (-3.0, 0.0, 3.0)], axis=None)
    scale = max(1.0, float(np.max(np.abs(probe))))
    return CenteringResult(resid, np.zeros(n), bool(np.all(np.abs(resid) <= tol * scale)))


# --------------------------------------------------------------------------
# Poisson equation


def _poisson_integrals(model: FrozenModel, xs: np.ndarray, ys: np.ndarray, phi, T_cut: float, n_nodes: int,
                       seed: int, paths: np.ndarray, track_mean: bool = False):
    """Trapezoidal ``int_0^T_cut phi(x, Y_t^x(y)) dt`` for each (x_i, y_i, path_i).

    Returns (integrals (P, m), mean integrand per node (n_nodes, m) or None).
    """
    op = model.op
    dt = T_cut / (n_nodes - 1)
    system = FrozenSystem(op, model.coeffs.g, model.noise2, dt)

    def work(idx):
        X = xs[idx]
        Y = ys[idx].copy()
        pid = paths[idx]
        Xg = op.to_grid_array(X)
        v = phi(X, Y)
        acc = 0.5 * v
        trace = [v.sum(axis=0)] if track_mean else None
        for k in range(1, n_nodes):
            Y = system.step(Y, Xg, k - 1, seed, pid)
            v = phi(X, Y)
            acc = acc + (0.5 * v if k == n_nodes - 1 else v)
            if track_mean:
                trace.append(v.sum(axis=0))
        system.check(Y, T_cut, pid)
        return dt * acc, (np.asarray(trace) if track_mean else None)

    parts = _parallel.map_chunks(work, np.arange(len(paths)))
    integrals = np.concatenate([p[0] for p in parts])
    mean_trace = None
    if track_mean:
        mean_trace = parts[0][1]
        for p in parts[1:]:
            mean_trace = mean_trace + p[1]
        mean_trace = mean_trace / len(paths)
    return integrals, mean_trace


@dataclass
class PoissonResult:
    value: np.ndarray
    stderr: np.ndarray
    tail_bound: np.ndarray
    T_cut: float

    @property
    def tail_norm(self) -> float:
        return float(np.linalg.norm(self.tail_bound))


def b_observable(model: FrozenModel):
    """The map (X, Y) -> B(X, Y) on coefficient arrays."""
    op, b = model.op, model.coeffs.b
    return lambda X, Y: nemytskii_spectral(b, op, X, Y)


def solve_poisson(model: FrozenModel, x: SpectralField, y: SpectralField, phi, cfg: PoissonConfig, seed: int,
                  sampler: InvariantSamplerConfig | None = None, centering_fn=None) -> PoissonResult:
    """Monte Carlo solution of ``L_2 Psi = -phi`` at (x, y).

    ``phi(X, Y)`` acts on coefficient arrays (P, n) and returns (P, m).  When
    ``sampler`` and ``centering_fn`` are given, the centering of
    ``centering_fn`` under mu^x is verified first.
    """
    cfg.validate()
    margin = model.require_dissipative()
    if sampler is not None and centering_fn is not None:
        cen = check_centering(model, x, centering_fn, sampler, derive_seed(seed, 7))
        if not cen.passed:
            raise CenteringError(cen.residual, cen.stderr)
    T_cut = cfg.resolved_T_cut(model)
    n = model.op.n_modes
    P = cfg.n_paths
    xs = np.broadcast_to(np.asarray(x.coeffs), (P, n))
    ys = np.broadcast_to(np.asarray(y.coeffs), (P, n))
    integrals, trace = _poisson_integrals(
        model, xs, ys, phi, T_cut, cfg.n_time_nodes, derive_seed(seed, 2), np.arange(P), track_mean=True
    )
    value = integrals.mean(axis=0)
    stderr = integrals.std(axis=0, ddof=1) / math.sqrt(P) if P > 1 else np.full(value.shape, np.nan)
    quarter = trace[-(len(trace) // 4):]
    tail = np.max(np.abs(quarter), axis=0) / margin
    if np.linalg.norm(tail) > 0.1 * np.linalg.norm(value) and np.linalg.norm(value) > 0:
        warnings.warn(
            f"Poisson tail bound {np.linalg.norm(tail):.3g} exceeds 10% of |Psi| {np.linalg.norm(value):.3g}",
            PoissonTailWarning,
            stacklevel=2,
        )
    return PoissonResult(value, stderr, tail, T_cut)


def generator_apply(model: FrozenModel, x: SpectralField, y: np.ndarray, psi, fd_step: float) -> np.ndarray:
    """``L_2 psi`` at y by central differences along the basis directions."""
    op = model.op
    y = np.asarray(y, dtype=float)
    n = op.n_modes
    drift = -op.alpha * y + nemytskii_spectral(model.coeffs.g, op, np.asarray(x.coeffs)[None, :], y[None, :])[0]
    lam = model.noise2.eigenvalues
    p0 = np.asarray(psi(y), dtype=float)
    out = np.zeros_like(p0)
    for k in range(n):
        e = np.zeros(n)
        e[k] = fd_step
        pp = np.asarray(psi(y + e), dtype=float)
        pm = np.asarray(psi(y - e), dtype=float)
        out = out + drift[k] * (pp - pm) / (2 * fd_step)
        out = out + 0.5 * lam[k] * (pp - 2 * p0 + pm) / fd_step**2
    return out


def check_poisson_residual(model: FrozenModel, x: SpectralField, y, psi, phi_value, fd_step: float = 1e-2) -> float:
    """Relative residual ``||L_2 psi + phi|| / ||phi||`` at (x, y).

    ``psi`` is a callable of y (coefficient vector) and ``phi_value`` the
    vector phi(x, y).  Returns ``||L_2 psi||`` when phi vanishes (0 when both do).
    """
    y = np.asarray(getattr(y, "coeffs", y), dtype=float)
    phi_value = np.asarray(phi_value, dtype=float)
    r = generator_apply(model, x, y, psi, fd_step) + phi_value
    nphi = np.linalg.norm(phi_value)
    if nphi == 0:
        return float(np.linalg.norm(r))
    return float(np.linalg.norm(r) / nphi)


def fit_linear_surrogate(ys: np.ndarray, psis: np.ndarray):
    """Least-squares affine map ``y -> a + K y`` through sampled (y, Psi) pairs."""
    ys = np.asarray(ys, dtype=float)
    design = np.hstack([np.ones((ys.shape[0], 1)), ys])
    coef, *_ = np.linalg.lstsq(design, np.asarray(psis, dtype=float), rcond=None)
    a, K = coef[0], coef[1:].T

    def surrogate(y):
        return a + K @ np.asarray(y, dtype=float)

    surrogate.offset = a
    surrogate.matrix = K
    return surrogate


def poisson_surrogate(model: FrozenModel, x: SpectralField, phi, inv_cfg: InvariantSamplerConfig,
                      cfg: PoissonConfig, seed: int, n_points: int = 64):
    """Affine surrogate of the Monte Carlo Poisson map fitted on invariant samples.

    Exact for the linear benchmark and an approximation otherwise.
    """
    samples = sample_invariant(model, x, inv_cfg, derive_seed(seed, 11)).reshape(-1, model.op.n_modes)
    idx = np.linspace(0, len(samples) - 1, min(n_points, len(samples))).astype(int)
    ys = samples[idx]
    T_cut = cfg.resolved_T_cut(model)
    P = cfg.n_paths
    n = model.op.n_modes
    xs = np.broadcast_to(np.asarray(x.coeffs), (len(ys) * P, n))
    starts = np.repeat(ys, P, axis=0)
    paths = np.tile(np.arange(P), len(ys))
    integrals, _ = _poisson_integrals(model, xs, starts, phi, T_cut, cfg.n_time_nodes, derive_seed(seed, 12), paths)
    psis = integrals.reshape(len(ys), P, -1).mean(axis=1)
    return fit_linear_surrogate(ys, psis)


# --------------------------------------------------------------------------
# averaged corrector terms


def _flat_samples(samples):
    C, S, n = samples.shape
    return samples.reshape(C * S, n), C, S


def _cost_guard(cfg: PoissonConfig, n_solves: int):
    if n_solves > cfg.max_solves:
        raise ConfigurationError(
            f"{n_solves} Poisson path solves exceed the configured budget {cfg.max_solves}"
        )


@dataclass
class TensorEstimate:
    M: np.ndarray
    stderr: np.ndarray
    asymmetry: float

    @property
    def sym(self) -> np.ndarray:
        return 0.5 * (self.M + self.M.T)


def estimate_BtensorPsi(model: FrozenModel, x: SpectralField, inv_cfg: InvariantSamplerConfig,
                        pois_cfg: PoissonConfig, seed: int, samples=None) -> TensorEstimate:
    """``M_jk = E_mu[<B(x,y), e_j> <Psi(x,y), e_k>]`` with Psi solving ``L_2 Psi = -B``."""
    op = model.op
    n = op.n_modes
    if model.coeffs.b.is_zero:
        z = np.zeros((n, n))
        return TensorEstimate(z, z.copy(), 0.0)
    pois_cfg.validate()
    model.require_dissipative()
    if samples is None:
        samples = sample_invariant(model, x, inv_cfg, seed)
    ys, C, S = _flat_samples(samples)
    M_s = ys.shape[0]
    P = pois_cfg.n_paths
    _cost_guard(pois_cfg, 2 * M_s * P)
    phi = b_observable(model)
    xrow = np.asarray(x.coeffs)
    Bs = phi(_xrep(x, M_s), ys)
    starts = np.concatenate([np.repeat(ys, P, axis=0), np.zeros((M_s * P, n))])
    path_ids = np.tile(np.arange(M_s * P), 2)
    xs = np.broadcast_to(xrow, (starts.shape[0], n))
    T_cut = pois_cfg.resolved_T_cut(model)
    integrals, _ = _poisson_integrals(model, xs, starts, phi, T_cut, pois_cfg.n_time_nodes,
                                      derive_seed(seed, 3), path_ids)
    psi = (integrals[: M_s * P] - integrals[M_s * P:]).reshape(M_s, P, n).mean(axis=1)
    prod = np.einsum("ij,ik->ijk", Bs, psi).reshape(C, S, n, n)
    mean, se = _average(prod)
    asym = float(np.linalg.norm(mean - mean.T) / max(np.linalg.norm(mean), 1e-300))
    _warn_accuracy(np.diag(mean), np.diag(se), "B (x) Psi")
    return TensorEstimate(mean, se, asym)


def estimate_drift_correction(model: FrozenModel, x: SpectralField, inv_cfg: InvariantSamplerConfig,
                              pois_cfg: PoissonConfig, seed: int, samples=None):
    """``E_mu[D_x Psi(x,y) . B(x,y)]`` by common-random-number central differences in x."""
    op = model.op
    n = op.n_modes
    if model.coeffs.b.is_zero:
        return SpectralField(np.zeros(n), op), np.zeros(n)
    pois_cfg.validate()
    model.require_dissipative()
    if samples is None:
        samples = sample_invariant(model, x, inv_cfg, seed)
    ys, C, S = _flat_samples(samples)
    M_s = ys.shape[0]
    P = pois_cfg.n_paths
    _cost_guard(pois_cfg, 4 * M_s * P)
    phi = b_observable(model)
    xrow = np.asarray(x.coeffs)
    Bs = phi(_xrep(x, M_s), ys)
    norms = np.linalg.norm(Bs, axis=1)
    dirs = np.divide(Bs, norms[:, None], out=np.zeros_like(Bs), where=norms[:, None] > 0)
    delta = pois_cfg.fd_step
    x_plus = np.repeat(xrow + delta * dirs, P, axis=0)
    x_minus = np.repeat(xrow - delta * dirs, P, axis=0)
    y_rep = np.repeat(ys, P, axis=0)
    zero = np.zeros_like(y_rep)
    xs = np.concatenate([x_plus, x_minus, x_plus, x_minus])
    starts = np.concatenate([y_rep, y_rep, zero, zero])
    ids = np.tile(np.arange(M_s * P), 4)
    T_cut = pois_cfg.resolved_T_cut(model)
    integrals, _ = _poisson_integrals(model, xs, starts, phi, T_cut, pois_cfg.n_time_nodes,
                                      derive_seed(seed, 4), ids)
    I = integrals.reshape(4, M_s, P, n).mean(axis=2)
    deriv = ((I[0] - I[1]) - (I[2] - I[3])) * (norms / (2 * delta))[:, None]
    mean, se = _average(deriv.reshape(C, S, n))
    return SpectralField(mean, op), se


def psd_sqrt(S: np.ndarray, tol_rel: float = 1e-8, stderr=None):
    """Principal square root of a symmetric matrix with eigenvalue clipping.

    Returns (R, clip_mass) with ``R R^T = S`` up to the clipped eigenvalues.
    """
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    scale = float(np.max(np.abs(w))) if w.size else 0.0
    tol = tol_rel * scale
    if w.size and w[0] < -tol:
        se = None
        if stderr is not None:
            v0 = V[:, 0]
            se = float(np.sqrt(np.sum((np.outer(v0, v0) * stderr) ** 2)))
        raise PSDError(float(w[0]), tol, se)
    neg = w < 0
    clip_mass = float(np.sum(-w[neg]))
    wc = np.where(neg, 0.0, w)
    R = (V * np.sqrt(wc)) @ V.T
    return R, clip_mass


def upsilon_from(M: np.ndarray, tol_rel: float = 1e-8, stderr=None):
    """Upsilon with ``0.5 Upsilon Upsilon^T = sym(M)``; returns (Upsilon, clip_mass)."""
    S = 0.5 * (M + M.T)
    R, clip = psd_sqrt(2.0 * S, tol_rel, None if stderr is None else 2.0 * np.asarray(stderr))
    return R, clip / 2.0


def cholesky_root(S: np.ndarray, reg: float = 1e-12) -> np.ndarray:
    """Lower-triangular root of a regularised symmetric PSD matrix."""
    S = 0.5 * (S + S.T)
    scale = max(float(np.max(np.abs(np.diag(S)))), 1e-300)
    return np.linalg.cholesky(S + reg * scale * np.eye(S.shape[0]))


# --------------------------------------------------------------------------
# bundle


@dataclass
class HomogenizedCoefficients:
    Fbar: np.ndarray
    SigmaBarSq: np.ndarray
    DriftCorrection: np.ndarray
    BtensorPsi: np.ndarray
    Upsilon: np.ndarray
    Fbar_stderr: np.ndarray = None
    SigmaBarSq_stderr: np.ndarray = None
    DriftCorrection_stderr: np.ndarray = None
    BtensorPsi_stderr: np.ndarray = None
    clip_mass: float = 0.0
    asymmetry: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("Fbar", "SigmaBarSq", "DriftCorrection", "BtensorPsi", "Upsilon"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} has non-finite entries")
            setattr(self, name, arr)
            se = getattr(self, name + "_stderr", None) if name != "Upsilon" else None
            if name != "Upsilon" and se is None:
                setattr(self, name + "_stderr", np.zeros_like(arr))

    def to_records(self, x: np.ndarray, config: dict | None = None) -> list[dict]:
        h = state_hash(x)
        recs = []
        for name in ("Fbar", "SigmaBarSq", "DriftCorrection", "BtensorPsi", "Upsilon"):
            se = getattr(self, name + "_stderr", None)
            recs.append({
                "state_hash": h,
                "coefficient": name,
                "value": np.asarray(getattr(self, name)).tolist(),
                "stderr": None if se is None else np.asarray(se).tolist(),
                "config": config or {},
            })
        return recs


def state_hash(x) -> str:
    arr = np.ascontiguousarray(np.asarray(getattr(x, "coeffs", x), dtype=np.float64))
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def estimate_homogenized(model: FrozenModel, x: SpectralField, inv_cfg: InvariantSamplerConfig,
                         pois_cfg: PoissonConfig, seed: int, check_centering_first: bool = True,
                         tol_rel: float = 1e-8) -> HomogenizedCoefficients:
    """All averaged coefficients of the limit equation at the slow state ``x``."""
    samples = sample_invariant(model, x, inv_cfg, seed)
    if check_centering_first and not model.coeffs.b.is_zero:
        cen = check_centering(model, x, model.coeffs.b, inv_cfg, seed, samples)
        if not cen.passed:
            raise CenteringError(cen.residual, cen.stderr)
    Fbar, Fse = estimate_Fbar(model, x, inv_cfg, seed, samples)
    Sig, Sig_se = estimate_SigmaBarSq(model, x, inv_cfg, seed, samples)
    corr, corr_se = estimate_drift_correction(model, x, inv_cfg, pois_cfg, seed, samples)
    tens = estimate_BtensorPsi(model, x, inv_cfg, pois_cfg, seed, samples)
    ups, clip = upsilon_from(tens.M, tol_rel, tens.stderr)
    return HomogenizedCoefficients(
        Fbar.coeffs, Sig, corr.coeffs, tens.M, ups,
        Fse, Sig_se, corr_se, tens.stderr, clip, tens.asymmetry,
    )


def config_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))
