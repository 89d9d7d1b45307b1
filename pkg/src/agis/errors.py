"""Exception hierarchy shared by all modules."""


class AgisError(Exception):
    """Base class for all package errors."""


class NonFiniteInput(AgisError, ValueError):
    """A NaN or Inf reached a computation that requires finite input."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class OutOfAttitudeSpan(AgisError, ValueError):
    pass


class OutOfMissionSpan(AgisError, ValueError):
    pass


class UnderdeterminedSource(AgisError):
    def __init__(self, source_id, reason):
        super().__init__(f"source {source_id}: {reason}")
        self.source_id = source_id
        self.reason = reason


class SingularBlock(AgisError):
    pass


class DegenerateAnchors(AgisError):
    pass


class NotConverged(AgisError):
    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


class ConfigError(AgisError, ValueError):
    pass


class StorageError(AgisError):
    pass


class CorruptBlock(StorageError):
    pass


class MissingArtifacts(StorageError):
    pass


class FiniteCheckFailed(AgisError):
    """Raised by the whiteboard tripwire.

    ``block`` names the accumulator (or payload section) and ``index`` the
    flat position of the first non-finite entry; ``job_id`` is set when the
    failure is detected during a merge.
    """

    def __init__(self, message, block=None, index=None, job_id=None, where=None):
        super().__init__(message)
        self.block = block
        self.index = index
        self.job_id = job_id
        self.where = where


class ChecksumMismatch(StorageError):
    pass


class InvalidState(AgisError):
    pass
