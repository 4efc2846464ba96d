"""Exception hierarchy shared by every fairscl module."""


class FairSCLError(Exception):
    """Base class for all package errors."""


class ConfigError(FairSCLError, ValueError):
    pass


class SchemaError(FairSCLError, ValueError):
    """A required column is missing from a delimited table."""


class ParseError(FairSCLError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ValidationError(FairSCLError, ValueError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class UndefinedMetricError(FairSCLError, ValueError):
    """A metric has no value on the given input (e.g. no positives)."""

    def __init__(self, message, category=None, metric=None, absolute=None):
        super().__init__(message)
        self.category = category
        self.metric = metric
        # relative_change still reports the absolute difference
        self.absolute = absolute


class BootstrapInfeasibleError(FairSCLError, RuntimeError):
    pass


class SeparationError(FairSCLError, ArithmeticError):
    pass


class RankError(FairSCLError, ArithmeticError):
    pass


class ShapeError(FairSCLError, ValueError):
    pass


class NaNGuardError(FairSCLError, FloatingPointError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class PretrainingInfeasibleError(FairSCLError, RuntimeError):
    pass


class CheckpointError(FairSCLError, ValueError):
    pass


class OutputError(FairSCLError, OSError):
    """The output directory cannot be created or written."""
