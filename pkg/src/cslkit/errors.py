"""Exception hierarchy shared across the toolkit."""


class CslError(Exception):
    """Base class for all toolkit errors."""


class NumericalError(CslError):
    """A numerical failure during integration (CLI exit code 1)."""


class KernelUnresolvable(CslError, ValueError):
    pass


class GridMismatch(CslError, ValueError):
    pass


class StepTooLarge(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class NonFinite(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ScheduleMismatch(CslError, ValueError):
    pass


class InsufficientData(CslError, ValueError):
    pass


class Undecidable(NumericalError):
    pass


class EmptyRecordSet(CslError, ValueError):
    pass


class UnboundVariable(CslError, KeyError):
    pass


class NonHermitian(CslError, ValueError):
    pass


class ConfigError(CslError):
    """Invalid run configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field, reason):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason
