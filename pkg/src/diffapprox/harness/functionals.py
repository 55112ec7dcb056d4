"""Bounded test functionals with bounded derivatives of every order."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError

CATALOG = ("cos_pairing", "gauss_bump", "smooth_sat")


@dataclass(frozen=True)
class Functional:
    name: str
    params: dict
    h: np.ndarray | None = None
    modes: tuple = ()
    scale: float = 1.0

    def __call__(self, x) -> np.ndarray | float:
        coeffs = np.asarray(getattr(x, "coeffs", x), dtype=float)
        single = coeffs.ndim == 1
        X = np.atleast_2d(coeffs)
        if self.name == "cos_pairing":
            out = np.cos(X @ self.h)
        elif self.name == "smooth_sat":
            out = np.tanh(X @ self.h)
        else:
            idx = np.asarray(self.modes, dtype=int) - 1
            out = np.exp(-self.scale * np.sum(X[:, idx] ** 2, axis=1))
        return float(out[0]) if single else out


def _direction(params: dict, n_modes: int) -> np.ndarray:
    if "h" in params:
        h = np.zeros(n_modes)
        vals = np.asarray(params["h"], dtype=float)
        if vals.ndim != 1 or vals.size > n_modes:
            raise ConfigurationError(f"h must list at most {n_modes} coefficients")
        h[: vals.size] = vals
        return h
    mode = int(params.get("mode", 1))
    if not 1 <= mode <= n_modes:
        raise ConfigurationError(f"mode {mode} outside 1..{n_modes}")
    h = np.zeros(n_modes)
    h[mode - 1] = float(params.get("weight", 1.0))
    return h


def make_functional(name: str, params: dict, n_modes: int) -> Functional:
    """Catalog lookup.

    ``cos_pairing`` and ``smooth_sat`` take a direction (``h`` as a list of
    coefficients, or ``mode`` plus optional ``weight``); ``gauss_bump`` takes
    ``modes`` (1-based) for its projection and an optional ``scale``.
    """
    params = dict(params or {})
    if name in ("cos_pairing", "smooth_sat"):
        allowed = {"h", "mode", "weight"}
    elif name == "gauss_bump":
        allowed = {"modes", "scale"}
    else:
        raise ConfigurationError(f"unknown functional {name!r}; choose from {', '.join(CATALOG)}")
    unknown = set(params) - allowed
    if unknown:
        raise ConfigurationError(f"unknown parameters for {name}: {sorted(unknown)}")
    if name == "gauss_bump":
        modes = tuple(int(m) for m in params.get("modes", [1]))
        if not modes or any(not 1 <= m <= n_modes for m in modes):
            raise ConfigurationError(f"gauss_bump modes must lie in 1..{n_modes}")
        return Functional(name, params, None, modes, float(params.get("scale", 1.0)))
    return Functional(name, params, _direction(params, n_modes))
