"""Exception types raised across the package."""


class StrongDFCError(Exception):
    """Base class for all package errors."""


class ShapeError(StrongDFCError, ValueError):
    def __init__(self, what, expected, got):
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected shape {expected}, got {got}")


class NumericError(StrongDFCError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class DivergenceError(StrongDFCError, ArithmeticError):
    def __init__(self, step, reason):
        self.step = step
        self.reason = reason
        super().__init__(f"dynamics diverged at step {step}: {reason}")


class StaleStateError(StrongDFCError, ValueError):
    """Steady-state quantities were requested from a state that has not converged."""

    def __init__(self, residual, tol):
        self.residual = residual
        self.tol = tol
        super().__init__(f"state not converged: |e - alpha*u| = {residual:.3e} > {tol:.1e}")


class ConditioningError(StrongDFCError, ArithmeticError):
    def __init__(self, cond, msg="linear system is (near-)singular"):
        self.cond = cond
        super().__init__(f"{msg} (condition number ~ {cond:.3e})")


class IdxParseError(StrongDFCError, ValueError):
    def __init__(self, path, offset, msg):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte offset {offset}: {msg}")


class ConfigError(StrongDFCError, ValueError):
    pass
