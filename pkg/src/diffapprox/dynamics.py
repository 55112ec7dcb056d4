"""Exponential Euler integration of the truncated slow-fast system and the frozen equation.

The diagonal linear part is propagated exactly and the stochastic
convolution of every step uses its exact per-mode variance.  The fast
equation is advanced in rescaled time ``tau = t / eps`` with ``m_eff``
substeps per macro step; the slow drift uses the trapezoidal average of
``F + eps^{-1/2} B`` over those substeps.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _parallel
from .errors import ConfigurationError, IntegrationBlowUp
from .functions import CoefficientSet, ScalarFn, sup_abs_derivative
from .noise import TAG_W1, TAG_W2, NoiseSpec, standard_normals
from .spectral import OperatorSpec, SpectralField


@dataclass(frozen=True)
class IntegratorConfig:
    dt_macro: float
    epsilon: float
    T_end: float
    micro_substeps_per_eps: int | None = None
    thinning: int = 10
    blowup_threshold: float = 1e10

    def __post_init__(self):
        if not self.dt_macro > 0:
            raise ConfigurationError("dt_macro must be positive")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if not self.T_end >= 0:
            raise ConfigurationError("T_end must be non-negative")
        n = self.T_end / self.dt_macro
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigurationError(
                f"T_end={self.T_end} is not a multiple of dt_macro={self.dt_macro}"
            )

    @property
    def n_steps(self) -> int:
        return int(round(self.T_end / self.dt_macro))

    @classmethod
    def for_epsilon(cls, epsilon: float, T_end: float, dt_ratio: float = 50.0, step_multiple: int = 1, **kw):
        """Largest macro step ``h <= epsilon / dt_ratio`` dividing ``T_end``.

        The step count is rounded up to a multiple of ``step_multiple``.
        """
        n = max(1, math.ceil(T_end * dt_ratio / epsilon - 1e-9))
        n = step_multiple * math.ceil(n / step_multiple)
        return cls(dt_macro=T_end / n, epsilon=epsilon, T_end=T_end, **kw)


def fast_lipschitz(g: ScalarFn) -> float:
    return 0.0 if g.is_constant else sup_abs_derivative(g, "v")


def resolve_substeps(cfg: IntegratorConfig, op: OperatorSpec, g: ScalarFn) -> int:
    """Number of fast substeps per macro step, validated against the relaxation bound."""
    h, eps = cfg.dt_macro, cfg.epsilon
    if eps >= 1:
        warnings.warn(f"epsilon={eps} >= 1: no scale separation", stacklevel=2)
    bound = 1.0 / (2.0 * (op.alpha[-1] + fast_lipschitz(g)))
    if cfg.micro_substeps_per_eps is None:
        return max(1, math.ceil(h / (eps * bound) - 1e-12))
    m = int(cfg.micro_substeps_per_eps)
    if m < 1:
        raise ConfigurationError("micro_substeps_per_eps must be a positive integer")
    m_eff = max(1, math.ceil(m * h / eps - 1e-12))
    dtau = h / (eps * m_eff)
    if dtau > bound * (1 + 1e-12):
        raise ConfigurationError(
            f"fast substep {dtau:.4g} (fast time) exceeds relaxation bound {bound:.4g}; "
            f"increase micro_substeps_per_eps"
        )
    return m_eff


def _check_finite(arrays, t, threshold, paths):
    for arr in arrays:
        bad = ~np.isfinite(arr) | (np.abs(arr) > threshold)
        if bad.any():
            p, k = np.argwhere(bad)[0]
            raise IntegrationBlowUp(t, int(k) + 1, int(paths[p]))


class SlowFastSystem:
    """Batched one-step map for arrays of shape (n_paths, n_modes)."""

    def __init__(self, op: OperatorSpec, coeffs: CoefficientSet, noise1: NoiseSpec,
                 noise2: NoiseSpec, cfg: IntegratorConfig):
        self.op, self.coeffs, self.cfg = op, coeffs, cfg
        self.noise1, self.noise2 = noise1, noise2
        for spec in (noise1, noise2):
            if spec.n_modes != op.n_modes:
                raise ConfigurationError("noise spec and operator disagree on n_modes")
        self.m_eff = resolve_substeps(cfg, op, coeffs.g)
        h, eps = cfg.dt_macro, cfg.epsilon
        self.h = h
        self.dtau = h / (eps * self.m_eff)
        self.inv_sqrt_eps = 1.0 / math.sqrt(eps)
        a = op.alpha
        self.eA = np.exp(-a * h)
        self.h_phi1 = h * op.phi1(h)
        self.sd1 = np.sqrt(op.convolution_variance(noise1.eigenvalues, h))
        self.eA_fast = np.exp(-a * self.dtau)
        self.dtau_phi1 = self.dtau * op.phi1(self.dtau)
        self.sd2 = np.sqrt(op.convolution_variance(noise2.eigenvalues, self.dtau))
        self.has_drift = not (coeffs.f.is_zero and coeffs.b.is_zero)
        self.has_g = not coeffs.g.is_zero
        self.has_noise1 = not (coeffs.sigma.is_zero or noise1.is_zero)
        self.sigma_const = coeffs.sigma.constant_value if coeffs.sigma.is_constant else None
        self.has_noise2 = not noise2.is_zero
        w = np.full(self.m_eff + 1, 1.0 / self.m_eff)
        w[0] = w[-1] = 0.5 / self.m_eff
        self.trap = w

    def _drift_grid(self, Xg, Yg):
        c = self.coeffs
        out = 0.0
        if not c.f.is_zero:
            out = out + c.f.eval(Xg, Yg)
        if not c.b.is_zero:
            out = out + self.inv_sqrt_eps * c.b.eval(Xg, Yg)
        return out

    def step(self, X, Y, step_index: int, seed: int, paths):
        op, c = self.op, self.coeffs
        n = op.n_modes
        need_grid = self.has_drift or self.has_g or (self.has_noise1 and self.sigma_const is None)
        Xg = op.to_grid_array(X) if need_grid else None
        Yg0 = op.to_grid_array(Y) if need_grid else None

        acc = None
        if self.has_drift:
            acc = self.trap[0] * self._drift_grid(Xg, Yg0)
        Yj, Ygj = Y, Yg0
        for j in range(self.m_eff):
            Ynext = self.eA_fast * Yj
            if self.has_g:
                Ynext = Ynext + self.dtau_phi1 * op.to_spectral_array(c.g.eval(Xg, Ygj))
            if self.has_noise2:
                z = standard_normals(seed, paths, TAG_W2, step_index * self.m_eff + j, n)
                Ynext = Ynext + self.sd2 * z
            Yj = Ynext
            if self.has_drift or (self.has_g and j + 1 < self.m_eff):
                Ygj = op.to_grid_array(Yj)
            if self.has_drift:
                acc = acc + self.trap[j + 1] * self._drift_grid(Xg, Ygj)

        Xn = self.eA * X
        if self.has_drift:
            Xn = Xn + self.h_phi1 * op.to_spectral_array(acc)
        if self.has_noise1:
            dW = self.sd1 * standard_normals(seed, paths, TAG_W1, step_index, n)
            if self.sigma_const is not None:
                Xn = Xn + self.sigma_const * dW
            else:
                s = c.sigma.eval(Xg, Yg0)
                Xn = Xn + op.to_spectral_array(s * op.to_grid_array(dW))
        return Xn, Yj


@dataclass(frozen=True, eq=False)
class SlowFastState:
    X: SpectralField
    Y: SpectralField
    t: float = 0.0

    def __post_init__(self):
        if self.X.op is not self.Y.op and self.X.op.n_modes != self.Y.op.n_modes:
            raise ConfigurationError("X and Y must share an operator")
        if not (self.t >= 0 and math.isfinite(self.t)):
            raise ConfigurationError("state time must be finite and non-negative")


def step_slow_fast(state: SlowFastState, cfg: IntegratorConfig, coeffs: CoefficientSet,
                   noise1: NoiseSpec, noise2: NoiseSpec, seed: int, path_id: int = 0) -> SlowFastState:
    """One macro step of size ``cfg.dt_macro`` for a single path."""
    op = state.X.op
    system = SlowFastSystem(op, coeffs, noise1, noise2, cfg)
    k = int(round(state.t / cfg.dt_macro))
    paths = np.array([path_id])
    X, Y = system.step(state.X.coeffs[None, :], state.Y.coeffs[None, :], k, seed, paths)
    t = (k + 1) * cfg.dt_macro
    _check_finite((X, Y), t, cfg.blowup_threshold, paths)
    return SlowFastState(SpectralField(X[0], op), SpectralField(Y[0], op), t)


def _run_chunk(system: SlowFastSystem, x0, y0, seed, paths, record=None, every=None):
    cfg = system.cfg
    P = paths.size
    X = np.broadcast_to(np.asarray(x0, dtype=float), (P, system.op.n_modes)).copy()
    Y = np.broadcast_to(np.asarray(y0, dtype=float), (P, system.op.n_modes)).copy()
    records = []
    if record is not None:
        records.append(record(X, Y))
    for k in range(cfg.n_steps):
        X, Y = system.step(X, Y, k, seed, paths)
        _check_finite((X, Y), (k + 1) * cfg.dt_macro, cfg.blowup_threshold, paths)
        if record is not None and ((k + 1) % every == 0 or k + 1 == cfg.n_steps):
            records.append(record(X, Y))
    return X, Y, records


def record_times(cfg: IntegratorConfig, every: int) -> np.ndarray:
    steps = [0] + [k + 1 for k in range(cfg.n_steps) if (k + 1) % every == 0 or k + 1 == cfg.n_steps]
    return np.asarray(steps) * cfg.dt_macro


def simulate_ensemble(op, coeffs, noise1, noise2, cfg, x0, y0, seed, paths, record=None,
                      every=None, chunk_size=_parallel.DEFAULT_CHUNK, threads=None):
    """Final states for every path id, plus optional per-path recorded observables.

    ``record(X, Y)`` maps a chunk of states to an array whose first axis is the
    path axis; recordings are stacked to shape (n_records, n_paths, ...).
    """
    system = SlowFastSystem(op, coeffs, noise1, noise2, cfg)
    every = cfg.thinning if every is None else every
    paths = np.asarray(paths, dtype=np.int64)

    def work(chunk):
        return _run_chunk(system, x0, y0, seed, chunk, record, every)

    parts = _parallel.map_chunks(work, paths, chunk_size, threads)
    X = np.concatenate([p[0] for p in parts])
    Y = np.concatenate([p[1] for p in parts])
    recs = None
    if record is not None:
        recs = np.concatenate([np.asarray(p[2]) for p in parts], axis=1)
    return X, Y, recs


def simulate_path(x0: SpectralField, y0: SpectralField, cfg: IntegratorConfig, coeffs: CoefficientSet,
                  noises, seed: int, path_id: int = 0, every: int | None = None) -> list[SlowFastState]:
    """Thinned trajectory of one path, deterministic in ``(seed, path_id)``."""
    noise1, noise2 = noises
    op = x0.op
    system = SlowFastSystem(op, coeffs, noise1, noise2, cfg)
    every = cfg.thinning if every is None else every
    paths = np.array([path_id])
    X, Y = x0.coeffs[None, :].copy(), y0.coeffs[None, :].copy()
    out = [SlowFastState(x0, y0, 0.0)]
    for k in range(cfg.n_steps):
        X, Y = system.step(X, Y, k, seed, paths)
        t = (k + 1) * cfg.dt_macro
        _check_finite((X, Y), t, cfg.blowup_threshold, paths)
        if (k + 1) % every == 0 or k + 1 == cfg.n_steps:
            out.append(SlowFastState(SpectralField(X[0], op), SpectralField(Y[0], op), t))
    return out


# --------------------------------------------------------------------------
# frozen equation dY = AY dt + G(x, Y) dt + dW2 in unscaled time


class FrozenSystem:
    """Batched exponential Euler for the frozen fast equation at fixed slow states."""

    def __init__(self, op: OperatorSpec, g: ScalarFn, noise2: NoiseSpec, dt: float,
                 blowup_threshold: float = 1e10):
        if not dt > 0:
            raise ConfigurationError("dt must be positive")
        self.op, self.g, self.noise2, self.dt = op, g, noise2, dt
        self.eA = np.exp(-op.alpha * dt)
        self.dt_phi1 = dt * op.phi1(dt)
        self.sd = np.sqrt(op.convolution_variance(noise2.eigenvalues, dt))
        self.has_g = not g.is_zero
        self.has_noise = not noise2.is_zero
        self.blowup_threshold = blowup_threshold

    def step(self, Y, Xg, step_index: int, seed: int, paths, tag: int = TAG_W2):
        op = self.op
        Yn = self.eA * Y
        if self.has_g:
            Yn = Yn + self.dt_phi1 * op.to_spectral_array(self.g.eval(Xg, op.to_grid_array(Y)))
        if self.has_noise:
            Yn = Yn + self.sd * standard_normals(seed, paths, tag, step_index, op.n_modes)
        return Yn

    def check(self, Y, t, paths):
        _check_finite((Y,), t, self.blowup_threshold, paths)


def simulate_frozen(x: SpectralField, y0: SpectralField, T: float, dt: float, coeffs: CoefficientSet,
                    noise2: NoiseSpec, seed: int, path_id: int = 0, every: int = 1):
    """Trajectory ``(times, Y)`` of the frozen process started at ``y0``; Y has shape (n_rec, n)."""
    op = x.op
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(T, 1.0):
        raise ConfigurationError("T must be a multiple of dt")
    system = FrozenSystem(op, coeffs.g, noise2, dt)
    paths = np.array([path_id])
    Xg = op.to_grid_array(x.coeffs[None, :])
    Y = y0.coeffs[None, :].copy()
    times, out = [0.0], [Y[0].copy()]
    for k in range(n_steps):
        Y = system.step(Y, Xg, k, seed, paths)
        system.check(Y, (k + 1) * dt, paths)
        if (k + 1) % every == 0 or k + 1 == n_steps:
            times.append((k + 1) * dt)
            out.append(Y[0].copy())
    return np.asarray(times), np.asarray(out)
