"""Exception types raised across the package."""


class PulseMagError(Exception):
    """Base class for every error raised by pulsemag."""


class ConfigError(PulseMagError, ValueError):
    pass


class SignalTooShortError(PulseMagError, ValueError):
    pass


class NoDominantFrequencyError(PulseMagError, ValueError):
    pass


class UnknownSubjectError(PulseMagError, KeyError):
    pass


class ShapeError(PulseMagError, ValueError):
    pass


class IngestionError(PulseMagError, IOError):
    def __init__(self, message: str, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path


class EncoderNotFoundError(PulseMagError, RuntimeError):
    pass


class DecodeError(PulseMagError, RuntimeError):
    def __init__(self, message: str, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path


class CompressionError(PulseMagError, RuntimeError):
    def __init__(self, message: str, failed=()):
        super().__init__(message)
        self.failed = list(failed)


class DivergenceError(PulseMagError, RuntimeError):
    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(f"{message}; state saved to {checkpoint_path}" if checkpoint_path is not None else message)
        self.checkpoint_path = checkpoint_path


class FreezeContractError(PulseMagError, RuntimeError):
    pass


class CheckpointVersionError(PulseMagError, ValueError):
    pass
