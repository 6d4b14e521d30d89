"""Exception hierarchy shared across the package."""


class SegUNetError(Exception):
    pass


class ConfigError(SegUNetError, ValueError):
    """Invalid configuration. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ShapeError(SegUNetError, ValueError):
    pass


class DataError(SegUNetError):
    """Problems with dataset folders or files. ``items`` lists offending paths/stems."""

    def __init__(self, message, items=None):
        super().__init__(message)
        self.items = list(items or [])


class CheckpointError(SegUNetError):
    pass


class SchemaVersionError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class TrainingDivergedError(SegUNetError):
    def __init__(self, step, lr, terms):
        self.step = step
        self.lr = lr
        self.terms = dict(terms)
        detail = " ".join(f"{k}={v:.6g}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at step {step} (lr={lr:.6g}) {detail}")
