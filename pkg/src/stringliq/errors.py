"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration/usage problems
exit 2, malformed input data exits 3, numerical failures exit 4.
"""


class StringliqError(Exception):
    """Base class for all package errors."""


class ConfigurationError(StringliqError):
    """Invalid grids, parameter sets or generator configuration."""


class DimensionError(StringliqError):
    """Mismatched array shapes or grids between operands."""


class DataError(StringliqError):
    """Malformed or inconsistent input data (files, event streams)."""


class EventParseError(DataError):
    """Raised by the event parser; carries per-line diagnostics."""

    def __init__(self, line_errors: list[tuple[int, str]]):
        self.line_errors = list(line_errors)
        lines = "; ".join(f"line {n}: {msg}" for n, msg in self.line_errors[:10])
        more = "" if len(self.line_errors) <= 10 else f" (+{len(self.line_errors) - 10} more)"
        super().__init__(f"{len(self.line_errors)} malformed event row(s): {lines}{more}")


class NumericalError(StringliqError):
    """Base class for failures of numerical procedures."""


class ClearingError(NumericalError):
    """Net demand curve has no zero crossing on the price grid."""


class NearFlatDemandError(NumericalError):
    """|dQ/dp| fell below the configured floor at some node."""


class SolverError(NumericalError):
    """Linear system could not be solved to tolerance."""


class PositivityError(NumericalError):
    """Low-band denominator of the risk-price solve fell below the floor."""


class CalibrationError(NumericalError):
    """Method-of-moments calibration could not produce usable kernels."""


class InversionError(NumericalError):
    """Implied-volatility target outside the attainable price band."""


class InapplicabilityError(NumericalError):
    """Closed-form construction used outside its hypotheses."""


class DomainError(NumericalError):
    """Function argument outside its mathematical domain."""
