"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes, so keep the classes coarse.
"""


class OrcaError(Exception):
    pass


class DomainError(OrcaError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ConfigError(OrcaError, ValueError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


class ValidationError(OrcaError, ValueError):
    """Configuration parses but violates a physical or protocol constraint (exit code 3)."""


class DivergenceError(OrcaError, ArithmeticError):
    def __init__(self, tau_ns, message="non-finite state"):
        self.tau_ns = tau_ns
        super().__init__(f"{message} at tau = {tau_ns:.4f} ns")


class FitError(OrcaError, RuntimeError):
    """Fit could not be performed or did not converge (exit code 5)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
