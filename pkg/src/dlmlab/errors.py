"""Exception types shared across the package."""


class DlmLabError(Exception):
    """Base class for package-specific failures."""


class ConfigError(DlmLabError):
    """Invalid or inconsistent configuration input."""


class InfeasibleScheduleError(DlmLabError):
    """Step schedule cannot realize the requested decode."""


class ProtocolViolationError(DlmLabError):
    """A scheduler or caller broke an operation contract."""


class CapacityError(DlmLabError):
    """Exact enumeration would exceed the configured cap."""


class EstimationError(DlmLabError):
    """Monte Carlo estimate could not be formed."""


class StallError(DlmLabError):
    """Scheduler produced no commits while masks remain."""


class InvalidTrajectoryError(DlmLabError):
    """Trajectory violates order-conservation."""


class LayoutError(DlmLabError):
    """Canvas layout is malformed."""


class IncompleteDecodeError(DlmLabError):
    """Operation requires a fully unmasked region."""


class LineProtocolError(DlmLabError):
    """Malformed message on the line-delimited JSON protocol."""

    def __init__(self, message: str, payload: str | None = None):
        super().__init__(message)
        self.payload = payload


class EndpointUnavailableError(DlmLabError):
    """External scorer/teacher endpoint unreachable after retries."""


class InstanceParseError(DlmLabError):
    """Tagged training-instance text failed to parse."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CurationError(DlmLabError):
    """Teacher failed while assembling a training instance."""

    def __init__(self, message: str, trace_index: int | None = None):
        super().__init__(message)
        self.trace_index = trace_index
