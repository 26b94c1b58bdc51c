"""Exception hierarchy shared by every seqemo module."""


class SeqEmoError(Exception):
    """Base class for all errors raised by seqemo."""


class ConfigError(SeqEmoError, ValueError):
    """Invalid configuration or hyperparameter."""


class DataError(SeqEmoError, ValueError):
    """Malformed or out-of-contract input data."""


class ShapeError(SeqEmoError, ValueError):
    """Tensor shapes that do not fit a layer."""


class NumericError(SeqEmoError, ArithmeticError):
    """NaN/Inf where finite values are required."""


class CacheError(SeqEmoError, OSError):
    """Unreadable feature cache file."""


class CheckpointError(SeqEmoError, OSError):
    """Unreadable or incompatible checkpoint file."""


class TrainingDivergedError(SeqEmoError, ArithmeticError):
    """Loss became non-finite during training."""

    def __init__(self, message, epoch=None, batch=None, value=None, fold=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.value = value
        self.fold = fold
