"""Exception hierarchy shared across the pipeline.

Exit-code mapping (see cli): ValidationError/FormatError -> 2,
InternalConsistencyError -> 3.
"""


class StreamSegError(Exception):
    pass


class FormatError(StreamSegError):
    """Malformed container: bad magic, version, or truncated payload."""


class ValidationError(StreamSegError):
    """A record violates an invariant; `field` names the offending field."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class PreconditionError(StreamSegError):
    """Caller violated an operation precondition."""


class InternalConsistencyError(StreamSegError):
    """Pipeline state is inconsistent (e.g. dangling query id)."""
