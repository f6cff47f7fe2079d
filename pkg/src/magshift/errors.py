"""Exception hierarchy shared by all stages."""


class MagshiftError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MagshiftError):
    """A configuration value is missing or out of range."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SchemaError(MagshiftError):
    pass


class ParseError(MagshiftError):
    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class IntegrityError(MagshiftError):
    pass


class InfeasibleSplitError(MagshiftError):
    pass


class FoldConstructionError(MagshiftError):
    pass


class ShapeError(MagshiftError, ValueError):
    pass


class GradientStateError(MagshiftError):
    """An optimizer step was requested for a parameter without a gradient."""


class TrainingError(MagshiftError):
    pass


class NumericError(MagshiftError):
    def __init__(self, epoch, message="non-finite loss"):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


class PolicyError(MagshiftError):
    pass


class FitError(MagshiftError):
    pass


class SelectionError(MagshiftError):
    pass


class UndefinedMetricError(MagshiftError):
    def __init__(self, metric, message="requires both classes in y_true"):
        self.metric = metric
        super().__init__(f"{metric} undefined: {message}")


class CheckpointError(MagshiftError):
    pass
