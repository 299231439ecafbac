"""Exception hierarchy shared across the package."""


class SpecfuseError(Exception):
    """Base class for all package errors."""


class DimensionError(SpecfuseError):
    """Shape or size mismatch between operands."""


class ContractError(SpecfuseError):
    """A call violated an operation's preconditions."""


class ParseError(SpecfuseError):
    """Malformed binary file or config input."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)
        self.offset = offset


class DegradationError(SpecfuseError):
    """A degradation operator produced invalid output (e.g. crop too small)."""


class GeneratorError(SpecfuseError):
    """Synthetic scene generator could not satisfy its guarantees."""


class MetricError(SpecfuseError):
    """Metric undefined for the given inputs."""


class TrainingAbort(SpecfuseError):
    """Training hit a non-finite loss; carries the last trace row."""

    def __init__(self, message, last_record=None):
        super().__init__(message)
        self.last_record = last_record
