"""Exception types raised across the package.

Every error carries enough location detail (row, column, stage) to point at
the first offending input; callers such as the CLI map these onto exit codes.
"""


class MsmmError(Exception):
    """Base class for all package errors."""


# --- data ingestion -------------------------------------------------------

class MissingColumn(MsmmError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"required column {column!r} not found in header")


class NonIntegerOutcome(MsmmError):
    def __init__(self, row, value):
        self.row = row
        super().__init__(f"outcome at data row {row} is not an integer: {value!r}")


class NegativeOutcome(MsmmError):
    def __init__(self, row, value):
        self.row = row
        super().__init__(f"outcome at data row {row} is negative: {value!r}")


class MissingValue(MsmmError):
    def __init__(self, row, column):
        self.row = row
        self.column = column
        super().__init__(f"missing value at data row {row}, column {column!r}")


class IndexOutOfRange(MsmmError):
    """A basis or weight term references a covariate index past the data."""


# --- model fitting --------------------------------------------------------

class RankDeficientDesign(MsmmError):
    """Design matrix does not have full column rank."""


class NoConvergence(MsmmError):
    """Iterative fit exhausted its iteration budget without converging."""


class SeparationSuspected(MsmmError):
    """Fitted rates overflow; the likelihood has no interior maximum."""


class NonBinaryTreatment(MsmmError):
    """The operation requires a two-arm 0/1 treatment."""


class OverflowGuard(MsmmError):
    """A linear predictor exceeded the exp() overflow boundary (|eta| > 700)."""


class SingularBread(MsmmError):
    """The estimated score derivative is too ill-conditioned to invert."""

    def __init__(self, condition_number):
        self.condition_number = condition_number
        super().__init__(
            "score derivative is numerically singular "
            f"(condition number {condition_number:.3e})"
        )


class ContrastOutsideSpan(MsmmError):
    """Requested effect contrast is not expressible by the basis terms."""


class TooManyRefitFailures(MsmmError):
    def __init__(self, failures, total):
        self.failures = failures
        self.total = total
        super().__init__(
            f"{failures} of {total} bootstrap refits failed (more than 10%)"
        )


class ScenarioError(MsmmError):
    """Simulation scenario file is malformed or has unknown keys."""
