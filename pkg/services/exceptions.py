"""
exceptions.py
Error types raised by the services. Input-contract errors are ValueErrors so callers
that only know about ValueError still catch them.
"""


class LoftError(Exception):
    """Base class for every error raised by loft-kit."""


class ShapeError(LoftError, ValueError):
    """Operand dimensions do not match."""


class ContractError(LoftError, ValueError):
    """Input violates a documented precondition (symmetry, skewness, orthonormality)."""


class DegenerateInputError(LoftError, ValueError):
    """Input is rank deficient where full rank is required."""


class ConfigError(LoftError, ValueError):
    """Invalid configuration or parameters."""


class MissingInputError(ConfigError):
    """A required input (e.g. a calibration gradient) was not provided."""


class MatrixFormatError(ConfigError):
    """A matrix file could not be parsed."""

    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class NumericalError(LoftError, ArithmeticError):
    """A numerical routine failed (singular system, non-convergence, non-finite values)."""


class EquivalenceError(LoftError):
    """A recovered configuration does not match its reference construction."""

    def __init__(self, report):
        self.report = report
        super().__init__(
            f"Recovery '{report.method}' residual {report.residual:.3e} exceeds tolerance {report.tolerance:.1e}"
        )
