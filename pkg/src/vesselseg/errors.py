"""Exception types shared across the package."""


class VesselSegError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(VesselSegError):
    """A tensor dimension does not match the operation's contract.

    Carries the offending axis name so callers can report precisely which
    dimension disagreed.
    """

    def __init__(self, axis: str, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch on axis '{axis}': expected {expected}, got {got}")


class ConfigError(VesselSegError):
    """Invalid configuration value or combination."""


class FileFormatError(VesselSegError):
    """Malformed container file; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class UndefinedMetricError(VesselSegError):
    """A distance metric is undefined (e.g. empty surface). Carries the case id when known."""

    def __init__(self, message: str, case_id: str | None = None):
        self.case_id = case_id
        super().__init__(message if case_id is None else f"{message} [case {case_id}]")


class NumericalAbortError(VesselSegError):
    """Training hit a non-finite value; carries the offending iteration index."""

    def __init__(self, iteration: int, detail: str = "non-finite loss"):
        self.iteration = iteration
        super().__init__(f"numerical abort at iteration {iteration}: {detail}")
