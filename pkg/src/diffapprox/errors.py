"""Exception hierarchy shared by all modules."""


class DiffApproxError(Exception):
    """Base class for all package errors."""


class DomainError(DiffApproxError, ValueError):
    """An argument lies outside the range where the operation is defined."""


class ConfigurationError(DiffApproxError, ValueError):
    """Inconsistent or invalid configuration."""


class ParseError(DiffApproxError, ValueError):
    """Syntax error in a coefficient expression."""

    def __init__(self, message, position):
        super().__init__(f"{message} at offset {position}")
        self.position = position


class EvaluationError(DiffApproxError, ArithmeticError):
    """Run-time failure while evaluating an expression tree."""

    def __init__(self, message, position=None):
        where = "" if position is None else f" (node at offset {position})"
        super().__init__(message + where)
        self.position = position


class IntegrationBlowUp(DiffApproxError, FloatingPointError):
    """Non-finite or runaway state detected during time stepping."""

    def __init__(self, t, mode, path=None):
        msg = f"integration blow-up at t={t:.6g}, mode index {mode}"
        if path is not None:
            msg += f", path {path}"
        super().__init__(msg)
        self.t = t
        self.mode = mode
        self.path = path


class CenteringError(DiffApproxError):
    """The fast drift coefficient fails the centering condition."""

    def __init__(self, residual, stderr):
        import numpy as np

        residual = np.asarray(residual, dtype=float)
        stderr = np.asarray(stderr, dtype=float)
        k = int(np.argmax(np.abs(residual) / np.maximum(stderr, 1e-300)))
        super().__init__(
            f"centering condition violated: invariant mean of B has component "
            f"{k + 1} = {residual[k]:.6g} (stderr {stderr[k]:.3g}); "
            f"residual norm {np.linalg.norm(residual):.6g}"
        )
        self.residual = residual
        self.stderr = stderr


class PSDError(DiffApproxError):
    """A matrix expected to be positive semidefinite is indefinite beyond tolerance."""

    def __init__(self, min_eigenvalue, tolerance, stderr=None):
        msg = f"matrix indefinite: most negative eigenvalue {min_eigenvalue:.6g} < -{tolerance:.3g}"
        if stderr is not None:
            msg += f" (stderr {stderr:.3g})"
        super().__init__(msg)
        self.min_eigenvalue = min_eigenvalue
        self.stderr = stderr
