"""Exponential Euler integration of the homogenized limit equation

    dXbar = (A Xbar + Fbar + correction) dt + Sigmabar dW1 + Upsilon dWtilde

with coefficients supplied by a provider, and Monte Carlo evaluation of the
limit semigroup ``u(t, x) = E[phi(Xbar_t(x))]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _parallel
from .errors import ConfigurationError, DiffApproxError
from .functions import CoefficientSet, multiplier_matrix, split_additive
from .homogenize import (
    FrozenModel,
    HomogenizedCoefficients,
    InvariantSamplerConfig,
    PoissonConfig,
    cholesky_root,
    estimate_homogenized,
    gauss_hermite_average,
    psd_sqrt,
)
from .noise import TAG_W1, TAG_WTILDE, NoiseSpec, derive_seed, standard_normals
from .spectral import OperatorSpec, SpectralField


def _root(S, method: str, tol_rel: float = 1e-8):
    if method == "principal":
        return psd_sqrt(S, tol_rel)[0]
    if method == "cholesky":
        return cholesky_root(S)
    raise ConfigurationError(f"unknown square-root method {method!r}")


def _batched_root(S: np.ndarray, method: str, tol_rel: float = 1e-8) -> np.ndarray:
    if S.ndim == 2:
        return _root(S, method, tol_rel)
    return np.stack([_root(s, method, tol_rel) for s in S])


class CoefficientProvider:
    """State -> limit coefficients.

    ``evaluate`` is the batched form used by the integrator: it returns the
    total drift (P, n), the Sigmabar root and the Upsilon matrix.  Roots are
    either None (absent), an (n, n) matrix shared by all paths, or a stack
    (P, n, n).
    """

    mode = "abstract"

    def evaluate(self, X: np.ndarray, paths: np.ndarray, step: int, seed: int):
        raise NotImplementedError

    def query(self, x: SpectralField) -> HomogenizedCoefficients:
        raise NotImplementedError


@dataclass
class AnalyticProvider(CoefficientProvider):
    """Closed-form coefficient maps acting on coefficient arrays (P, n).

    ``fbar`` and ``correction`` return (P, n); ``sigma_sq`` returns (n, n) or
    (P, n, n); ``upsilon`` returns (n, n) or (P, n, n).  Any of them may be None.
    """

    op: OperatorSpec
    fbar: object = None
    sigma_sq: object = None
    correction: object = None
    upsilon: object = None
    sqrt_method: str = "principal"
    mode: str = "analytic"

    def _drift(self, X):
        d = np.zeros_like(X)
        if self.fbar is not None:
            d = d + self.fbar(X)
        if self.correction is not None:
            d = d + self.correction(X)
        return d

    def evaluate(self, X, paths=None, step=0, seed=0):
        sig = None
        if self.sigma_sq is not None:
            sig = _batched_root(np.asarray(self.sigma_sq(X)), self.sqrt_method)
        ups = None if self.upsilon is None else np.asarray(self.upsilon(X))
        return self._drift(X), sig, ups

    def query(self, x: SpectralField) -> HomogenizedCoefficients:
        n = self.op.n_modes
        X = np.asarray(x.coeffs)[None, :]
        zero_v, zero_m = np.zeros(n), np.zeros((n, n))
        fb = self.fbar(X)[0] if self.fbar is not None else zero_v
        corr = self.correction(X)[0] if self.correction is not None else zero_v
        sig = np.asarray(self.sigma_sq(X)) if self.sigma_sq is not None else zero_m
        ups = np.asarray(self.upsilon(X)) if self.upsilon is not None else zero_m
        sig = sig[0] if sig.ndim == 3 else sig
        ups = ups[0] if ups.ndim == 3 else ups
        return HomogenizedCoefficients(fb, sig, corr, 0.5 * ups @ ups.T, ups)


@dataclass
class MonteCarloProvider(CoefficientProvider):
    """Coefficients re-estimated by the homogenize module every ``k_reuse`` steps.

    Estimates are cached per path and frozen between refreshes; nested
    streams are keyed by (outer seed, path, step).
    """

    model: FrozenModel
    inv_cfg: InvariantSamplerConfig
    pois_cfg: PoissonConfig
    k_reuse: int = 5
    sqrt_method: str = "principal"
    mode: str = "monte-carlo"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.k_reuse < 1:
            raise ConfigurationError("k_reuse must be >= 1")

    @property
    def op(self) -> OperatorSpec:
        return self.model.op

    def query(self, x: SpectralField, seed: int = 0) -> HomogenizedCoefficients:
        return estimate_homogenized(self.model, x, self.inv_cfg, self.pois_cfg, seed)

    def _entry(self, x_row, path, step, seed):
        key = int(path)
        refresh_step = (step // self.k_reuse) * self.k_reuse
        hit = self._cache.get(key)
        if hit is not None and hit[0] == refresh_step and hit[1] == seed:
            return hit[2]
        x = SpectralField(np.array(x_row), self.model.op)
        hc = self.query(x, derive_seed(seed, 21, int(path), refresh_step))
        sig = _root(hc.SigmaBarSq, self.sqrt_method)
        ups = hc.Upsilon if self.sqrt_method == "principal" else cholesky_root(hc.BtensorPsi + hc.BtensorPsi.T)
        entry = (hc.Fbar + hc.DriftCorrection, sig, ups)
        self._cache[key] = (refresh_step, seed, entry)
        return entry

    def evaluate(self, X, paths, step, seed):
        entries = [self._entry(X[i], paths[i], step, seed) for i in range(X.shape[0])]
        drift = np.stack([e[0] for e in entries])
        sig = np.stack([e[1] for e in entries])
        ups = np.stack([e[2] for e in entries])
        return drift, sig, ups


def linear_fast_provider(op: OperatorSpec, coeffs: CoefficientSet, noise2: NoiseSpec,
                         n_quad: int = 40, sqrt_method: str = "principal") -> AnalyticProvider:
    """Exact coefficients when the fast drift is ``g = -c v``.

    The frozen law is then the centered Gaussian with covariance
    ``lambda_k / (2 (alpha_k + c))`` independent of x, so Fbar and Sigmabar^2
    reduce to one-dimensional Gaussian averages per grid point.  The Poisson
    terms are closed form only for ``b = beta v``.
    """
    c_neg = coeffs.g.linear_coefficient("v")
    if c_neg is None or not c_neg < 0:
        raise ConfigurationError("closed-form provider needs g = -c*v with c > 0")
    c = -c_neg
    alpha = op.alpha
    lam2 = noise2.eigenvalues
    cov = lam2 / (2.0 * (alpha + c))
    S = op.synthesis_matrix
    var_grid = (S**2) @ cov

    f, sig, b = coeffs.f, coeffs.sigma, coeffs.b

    if f.is_zero:
        fbar = None
    else:
        f_free, f_only, f_mixed = split_additive(f, "v")
        # terms in v alone average to a fixed grid profile
        only_avg = None
        if not f_only.is_zero:
            zero_u = np.zeros((1, op.n_grid))
            only_avg = gauss_hermite_average(f_only, zero_u, var_grid[None, :], n_quad)[0]

        def fbar(X):
            Xg = op.to_grid_array(X)
            vals = np.zeros_like(Xg)
            if not f_free.is_zero:
                vals = vals + f_free.eval(Xg, np.zeros_like(Xg))
            if only_avg is not None:
                vals = vals + only_avg
            if not f_mixed.is_zero:
                vals = vals + gauss_hermite_average(f_mixed, Xg, var_grid, n_quad)
            return op.to_spectral_array(vals)

    if sig.is_zero:
        sigma_sq = None
    elif sig.is_constant:
        M = multiplier_matrix(np.full(op.n_grid, sig.constant_value**2), op)
        def sigma_sq(X, _M=M):
            return _M
    else:
        def sigma_sq(X):
            Xg = op.to_grid_array(X)
            t, w = np.polynomial.hermite_e.hermegauss(n_quad)
            w = w / w.sum()
            sd = np.sqrt(var_grid)
            acc = 0.0
            for ti, wi in zip(t, w):
                acc = acc + wi * np.asarray(sig.eval(Xg, np.broadcast_to(ti * sd, Xg.shape))) ** 2
            return multiplier_matrix(acc, op)

    if b.is_zero:
        correction = upsilon = None
    else:
        beta = b.linear_coefficient("v")
        if beta is None:
            raise ConfigurationError("closed-form Poisson terms need b = beta*v")
        correction = None
        U = np.diag(abs(beta) * np.sqrt(lam2) / (c + alpha))
        def upsilon(X, _U=U):
            return _U

    return AnalyticProvider(op, fbar, sigma_sq, correction, upsilon, sqrt_method)


@dataclass(frozen=True)
class LimitConfig:
    dt: float
    T_end: float
    noise1: NoiseSpec
    noise_tilde: NoiseSpec | None = None
    thinning: int = 10

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        n = self.T_end / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigurationError("T_end must be a multiple of dt")
        if self.noise_tilde is None:
            object.__setattr__(self, "noise_tilde", NoiseSpec.cylindrical(self.noise1.n_modes))

    @property
    def n_steps(self) -> int:
        return int(round(self.T_end / self.dt))


class LimitSystem:
    """Batched one-step map of the limit equation."""

    def __init__(self, op: OperatorSpec, provider: CoefficientProvider, cfg: LimitConfig):
        self.op, self.provider, self.cfg = op, provider, cfg
        h = cfg.dt
        self.eA = op.semigroup_factor(h)
        self.h_phi1 = h * op.phi1(h)
        self.sd1 = np.sqrt(op.convolution_variance(cfg.noise1.eigenvalues, h))
        self.sd_tilde = np.sqrt(op.convolution_variance(cfg.noise_tilde.eigenvalues, h))

    @staticmethod
    def _apply(R, v):
        if R.ndim == 2:
            return v @ R.T
        return np.einsum("pij,pj->pi", R, v)

    def step(self, X, step_index: int, seed: int, paths):
        n = self.op.n_modes
        drift, sig, ups = self.provider.evaluate(X, paths, step_index, seed)
        Xn = self.eA * X + self.h_phi1 * drift
        if sig is not None:
            dW = self.sd1 * standard_normals(seed, paths, TAG_W1, step_index, n)
            Xn = Xn + self._apply(sig, dW)
        if ups is not None:
            dWt = self.sd_tilde * standard_normals(seed, paths, TAG_WTILDE, step_index, n)
            Xn = Xn + self._apply(ups, dWt)
        return Xn


def step_limit(Xbar: SpectralField, cfg: LimitConfig, provider: CoefficientProvider, seed: int,
               path_id: int, step: int) -> SpectralField:
    op = Xbar.op
    system = LimitSystem(op, provider, cfg)
    try:
        X = system.step(np.asarray(Xbar.coeffs)[None, :], step, seed, np.array([path_id]))
    except DiffApproxError as exc:
        exc.args = exc.args + (f"at limit state {np.asarray(Xbar.coeffs).tolist()}",)
        raise
    return SpectralField(X[0], op)


def simulate_limit_ensemble(op: OperatorSpec, provider: CoefficientProvider, cfg: LimitConfig, x0, seed: int,
                            paths, n_steps: int | None = None, record=None, every: int | None = None,
                            chunk_size: int = _parallel.DEFAULT_CHUNK, threads=None):
    """Limit states after ``n_steps`` (default: all) for every path id."""
    system = LimitSystem(op, provider, cfg)
    n_steps = cfg.n_steps if n_steps is None else n_steps
    every = cfg.thinning if every is None else every
    paths = np.asarray(paths, dtype=np.int64)

    def work(chunk):
        X = np.broadcast_to(np.asarray(x0, dtype=float), (chunk.size, op.n_modes)).copy()
        recs = [record(X)] if record is not None else None
        for k in range(n_steps):
            X = system.step(X, k, seed, chunk)
            if not np.all(np.isfinite(X)):
                raise ConfigurationError(f"limit integration produced non-finite values at t={(k + 1) * cfg.dt}")
            if record is not None and ((k + 1) % every == 0 or k + 1 == n_steps):
                recs.append(record(X))
        return X, recs

    parts = _parallel.map_chunks(work, paths, chunk_size, threads)
    X = np.concatenate([p[0] for p in parts])
    if record is None:
        return X
    return X, np.concatenate([np.asarray(p[1]) for p in parts], axis=1)


def eval_semigroup(t: float, x, phi, cfg: LimitConfig, provider: CoefficientProvider, n_paths: int,
                   seed: int, threads=None):
    """Monte Carlo ``E[phi(Xbar_t(x))]`` and its standard error.

    ``phi`` maps a coefficient array (P, n) to (P,).
    """
    coeffs = np.asarray(getattr(x, "coeffs", x), dtype=float)
    op = x.op if isinstance(x, SpectralField) else provider.op
    if t < 0:
        raise ConfigurationError("t must be non-negative")
    k = t / cfg.dt
    if abs(k - round(k)) > 1e-9 * max(1.0, k):
        raise ConfigurationError("t must be a multiple of the limit time step")
    k = int(round(k))
    if k == 0:
        return float(np.asarray(phi(coeffs[None, :]))[0]), 0.0
    XT = simulate_limit_ensemble(op, provider, cfg, coeffs, seed, np.arange(n_paths), n_steps=k, threads=threads)
    vals = np.asarray(phi(XT), dtype=float)
    se = float(np.std(vals, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("nan")
    return float(vals.mean()), se
