"""Q-Wiener increments from a stateless counter-based generator, plus validators.

Every Gaussian draw is a pure function of ``(seed, path, tag, step, index)``
through Philox4x32-10, so ensembles are reproducible no matter how paths are
scheduled across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ConfigurationError, DomainError
from .spectral import OperatorSpec, SpectralField

# equation tags used as the fourth counter word
TAG_W1 = 1
TAG_W2 = 2
TAG_WTILDE = 3
TAG_INIT = 4
TAG_DERIVE = 5

ROLES = ("W1", "W2", "Wtilde")

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


@nb.njit(cache=True, nogil=True)
def _philox_block(c0, c1, c2, c3, k0, k1):
    for r in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK
        c0 = (hi1 ^ c1 ^ k0) & _MASK
        c1 = lo1
        c2 = (hi0 ^ c3 ^ k1) & _MASK
        c3 = lo0
        if r < 9:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@nb.njit(cache=True, nogil=True)
def _philox_raw(counters, k0, k1, out):
    for i in range(counters.shape[0]):
        a, b, c, d = _philox_block(
            counters[i, 0], counters[i, 1], counters[i, 2], counters[i, 3], k0, k1
        )
        out[i, 0] = a
        out[i, 1] = b
        out[i, 2] = c
        out[i, 3] = d


@nb.njit(cache=True, nogil=True)
def _normals_kernel(k0, k1, paths, tag, step, n, out):
    two_pi = 2.0 * math.pi
    inv53 = 1.0 / 9007199254740992.0
    nblocks = (n + 1) // 2
    s = np.uint64(step) & _MASK
    t = np.uint64(tag) & _MASK
    for p in range(paths.shape[0]):
        pid = np.uint64(paths[p]) & _MASK
        for j in range(nblocks):
            a, b, c, d = _philox_block(np.uint64(j), s, pid, t, k0, k1)
            u1 = ((a >> np.uint64(5)) * np.uint64(67108864) + (b >> np.uint64(6))) * inv53
            u2 = ((c >> np.uint64(5)) * np.uint64(67108864) + (d >> np.uint64(6))) * inv53
            r = math.sqrt(-2.0 * math.log(1.0 - u1))
            out[p, 2 * j] = r * math.cos(two_pi * u2)
            if 2 * j + 1 < n:
                out[p, 2 * j + 1] = r * math.sin(two_pi * u2)


def _split_seed(seed: int):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def philox4x32(counter, key) -> tuple:
    """One Philox4x32-10 block; exposed for known-answer tests."""
    ctr = np.asarray([counter], dtype=np.uint64)
    out = np.empty((1, 4), dtype=np.uint64)
    _philox_raw(ctr, np.uint64(key[0]), np.uint64(key[1]), out)
    return tuple(int(v) for v in out[0])


def standard_normals(seed: int, paths, tag: int, step: int, n: int) -> np.ndarray:
    """Array (len(paths), n) of N(0,1) draws keyed by (seed, path, tag, step)."""
    paths = np.ascontiguousarray(np.atleast_1d(np.asarray(paths, dtype=np.int64)))
    if step < 0 or step >= 2**32:
        raise DomainError(f"step counter out of range: {step}")
    k0, k1 = _split_seed(seed)
    out = np.empty((paths.shape[0], n))
    _normals_kernel(k0, k1, paths, int(tag), int(step), int(n), out)
    return out


def derive_seed(seed: int, *words: int) -> int:
    """Sub-seed for nested ensembles, a pure function of ``seed`` and ``words``."""
    k0, k1 = _split_seed(seed)
    w = [int(x) & 0xFFFFFFFF for x in words][:3]
    w += [0] * (3 - len(w))
    ctr = np.asarray([[w[0], w[1], w[2], TAG_DERIVE]], dtype=np.uint64)
    out = np.empty((1, 4), dtype=np.uint64)
    _philox_raw(ctr, k0, k1, out)
    return int(out[0, 0]) | (int(out[0, 1]) << 32)


@dataclass(frozen=True)
class RngStream:
    seed: int
    path: int = 0
    tag: int = TAG_W1
    step: int = 0

    def normals(self, n: int) -> np.ndarray:
        return standard_normals(self.seed, [self.path], self.tag, self.step, n)[0]

    def at_step(self, step: int) -> "RngStream":
        return RngStream(self.seed, self.path, self.tag, step)


# --------------------------------------------------------------------------
# covariance specs


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Diagonal covariance ``Q e_k = lambda_k e_k``.

    Built either from explicit eigenvalues or from the rule
    ``lambda_k = lambda0 * k**(-decay_r)``.
    """

    eigenvalues: np.ndarray
    role: str = "W1"
    kind: str = "explicit"
    lambda0: float | None = None
    decay_r: float | None = None

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).copy()
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown noise role {self.role!r}")
        if lam.ndim != 1 or lam.size == 0:
            raise ConfigurationError("noise eigenvalues must be a non-empty sequence")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ConfigurationError("noise eigenvalues must be finite and non-negative")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    @classmethod
    def from_rule(cls, lambda0: float, decay_r: float, n_modes: int, role: str = "W1"):
        if not lambda0 > 0:
            raise ConfigurationError("lambda0 must be positive")
        k = np.arange(1, n_modes + 1, dtype=float)
        return cls(lambda0 * k ** (-float(decay_r)), role, "rule", float(lambda0), float(decay_r))

    @classmethod
    def explicit(cls, values, role: str = "W1"):
        return cls(np.asarray(values, dtype=float), role, "explicit")

    @classmethod
    def cylindrical(cls, n_modes: int):
        return cls(np.ones(n_modes), "Wtilde", "explicit")

    @classmethod
    def from_config(cls, cfg: dict, n_modes: int, role: str | None = None) -> "NoiseSpec":
        allowed = {"kind", "lambda0", "decay_r", "values", "role"}
        unknown = set(cfg) - allowed
        if unknown:
            raise ConfigurationError(f"unknown noise keys: {sorted(unknown)}")
        role = cfg.get("role", role or "W1")
        kind = cfg.get("kind", "rule")
        if kind == "rule":
            return cls.from_rule(cfg.get("lambda0", 1.0), cfg.get("decay_r", 2.0), n_modes, role)
        if kind == "explicit":
            values = cfg.get("values")
            if values is None or len(values) != n_modes:
                raise ConfigurationError(f"explicit noise spec needs {n_modes} values")
            return cls.explicit(values, role)
        raise ConfigurationError(f"unknown noise kind {kind!r}")

    def to_config(self) -> dict:
        if self.kind == "rule":
            return {"kind": "rule", "lambda0": self.lambda0, "decay_r": self.decay_r, "role": self.role}
        return {"kind": "explicit", "values": [float(v) for v in self.eigenvalues], "role": self.role}

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.eigenvalues == 0))


def sample_increment(spec: NoiseSpec, dt: float, stream: RngStream, op: OperatorSpec | None = None) -> SpectralField:
    """Brownian increment over ``dt``: coefficient k is ``sqrt(lambda_k dt) Z_k``."""
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    z = stream.normals(spec.n_modes)
    coeffs = np.sqrt(spec.eigenvalues * dt) * z
    if op is None:
        op = OperatorSpec(np.pi, spec.n_modes)
    return SpectralField(coeffs, op)


def sample_increments(spec: NoiseSpec, dt: float, seed: int, paths, tag: int, step: int) -> np.ndarray:
    """Batched increments, shape (len(paths), n_modes)."""
    z = standard_normals(seed, paths, tag, step, spec.n_modes)
    return np.sqrt(spec.eigenvalues * dt) * z


# --------------------------------------------------------------------------
# validators


@dataclass
class TraceReport:
    partial_sum: float
    tail_bound: float | None
    trace_class: bool
    decay_exponent: float | None
    message: str = ""


def _fitted_decay(lam: np.ndarray):
    """Least-squares exponent r in lambda_k ~ k^-r over the upper half of the modes."""
    n = lam.size
    if n < 3 or np.any(lam <= 0):
        return None
    k = np.arange(1, n + 1)
    sel = slice(n // 2, n) if n >= 6 else slice(0, n)
    slope = np.polyfit(np.log(k[sel]), np.log(lam[sel]), 1)[0]
    return float(-slope)


def check_trace(spec: NoiseSpec) -> TraceReport:
    """Truncated trace plus, for rule specs, the analytic tail beyond the truncation."""
    lam = spec.eigenvalues
    total = float(np.sum(lam))
    n = lam.size
    if spec.role == "Wtilde":
        return TraceReport(total, None, True, 0.0, "cylindrical process: trace class not required")
    if spec.kind == "rule":
        r = spec.decay_r
        ok = r > 1
        tail = spec.lambda0 * n ** (1 - r) / (r - 1) if ok else math.inf
        msg = "" if ok else f"decay_r={r} <= 1: covariance is not trace class"
        return TraceReport(total, tail, ok, r, msg)
    r = _fitted_decay(lam)
    if r is None:
        return TraceReport(total, None, True, None, "too few modes to infer tail decay")
    ok = r > 1
    msg = "" if ok else f"explicit eigenvalues decay with fitted exponent {r + 0.0:.3g} <= 1: not trace class"
    return TraceReport(total, None, ok, r, msg)


@dataclass
class RadonifyingReport:
    value: float
    tail_indicator: np.ndarray
    tail_exponent: float | None
    finite: bool


def check_radonifying(op: OperatorSpec, spec: NoiseSpec, gamma: float, T: float) -> RadonifyingReport:
    """Hilbert-Schmidt (p = 2) value of ``int_0^T ||(-A)^g e^{tA} Q^{1/2}||^2 dt``."""
    if not 0.0 <= gamma < 0.5:
        raise DomainError(f"gamma must lie in [0, 1/2), got {gamma}")
    if not T > 0:
        raise DomainError("T must be positive")
    a = op.alpha
    lam = spec.eigenvalues
    per_mode = lam * a ** (2 * gamma - 1) * (-np.expm1(-2 * a * T)) / 2
    indicator = lam * a ** (2 * gamma - 1)
    if spec.kind == "rule" and op.n_modes > 0 and _dirichlet_default(op):
        # alpha_k ~ k^2, so the terms decay like k^(-r + 4 gamma - 2)
        expo = spec.decay_r + 2 - 4 * gamma
    else:
        expo = _fitted_decay(indicator)
    finite = True if expo is None else expo > 1
    return RadonifyingReport(float(np.sum(per_mode)), indicator, expo, finite)


def _dirichlet_default(op: OperatorSpec) -> bool:
    k = np.arange(1, op.n_modes + 1)
    return bool(np.allclose(op.alpha, (k * np.pi / op.domain_length) ** 2))


def lambda_t(op: OperatorSpec, spec_fast: NoiseSpec, t: float) -> float:
    """``sup_k 2 alpha_k / (lambda_k (exp(2 alpha_k t) - 1))`` over retained modes."""
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    a = op.alpha
    lam = spec_fast.eigenvalues
    with np.errstate(divide="ignore", over="ignore"):
        vals = 2 * a / (lam * np.expm1(2 * a * t))
    return float(np.max(vals))


@dataclass
class LambdaReport:
    integral: float
    small_t_exponent: float
    integrand_exponent: float
    divergent: bool


def check_lambda_integrability(
    op: OperatorSpec, spec_fast: NoiseSpec, vartheta: float = 1.0, T: float = 1.0, n_nodes: int = 400
) -> LambdaReport:
    """Graded-mesh quadrature of ``Lambda_t^((1+vartheta)/2)`` over (0, T]."""
    if not 0.0 <= vartheta <= 1.0:
        raise DomainError("vartheta must lie in [0, 1]")
    if not T > 0:
        raise DomainError("T must be positive")
    power = (1 + vartheta) / 2
    t_min = T * 1e-12
    t = np.geomspace(t_min, T, n_nodes)
    vals = np.array([lambda_t(op, spec_fast, s) for s in t]) ** power
    integral = float(np.trapezoid(vals, t))
    # local power law at the small-t end of the mesh
    lo = slice(0, 20)
    expo = float(np.polyfit(np.log(t[lo]), np.log(vals[lo] ** (1 / power)), 1)[0])
    integrand_expo = power * expo
    divergent = integrand_expo <= -1 + 1e-6
    if not divergent:
        # analytic remainder on (0, t_min) for the fitted power law
        c = vals[0] / t_min**integrand_expo
        integral += c * t_min ** (integrand_expo + 1) / (integrand_expo + 1)
    return LambdaReport(integral, expo, integrand_expo, bool(divergent))
