"""Exception hierarchy shared across the package."""


class MiFuseError(Exception):
    """Base class for every error raised by mifuse."""


class ShapeError(MiFuseError, ValueError):
    """Array dimensions do not match what the model or data expects."""


class InputError(MiFuseError, ValueError):
    """Input values are unusable (non-finite, out of range)."""


class ContractError(MiFuseError, RuntimeError):
    """An API was called out of order or with stale bookkeeping."""


class ValidationError(MiFuseError, ValueError):
    """A config, dataset or argument failed validation."""


class TrainingAborted(MiFuseError, FloatingPointError):
    """Optimization hit non-finite values and cannot continue."""


class TransportError(MiFuseError, RuntimeError):
    """A teacher provider could not be reached (retriable)."""


class MissingCacheEntry(TransportError):
    """Cache-only provider was asked for a key that was never cached."""

    def __init__(self, utterance_id, sample_index):
        self.utterance_id = utterance_id
        self.sample_index = sample_index
        super().__init__(
            f"no cached LALM prediction for ({utterance_id!r}, {sample_index})"
        )


class DatasetError(MiFuseError, ValueError):
    """A dataset file is malformed or violates an invariant."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
