"""Exception types shared across the package."""


class AdvLMError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(AdvLMError, ValueError):
    pass


class TargetOutOfRange(AdvLMError, IndexError):
    pass


class TokenOutOfRange(AdvLMError, IndexError):
    pass


class NotScalar(AdvLMError, ValueError):
    pass


class DisconnectedLoss(AdvLMError, RuntimeError):
    pass


class InvalidRate(AdvLMError, ValueError):
    pass


class ConfigInvalid(AdvLMError, ValueError):
    pass


class NonFiniteLoss(AdvLMError, FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class EmptyCorpus(AdvLMError, ValueError):
    pass


class CorpusTooSmall(AdvLMError, ValueError):
    pass


class IoFailure(AdvLMError, OSError):
    pass


class VersionMismatch(AdvLMError):
    pass


class CorruptCheckpoint(AdvLMError):
    pass


class NoGeneratorInCheckpoint(AdvLMError):
    pass
