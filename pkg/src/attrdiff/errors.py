"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code (see ``attrdiff.cli``).
"""


class AttrDiffError(Exception):
    exit_code = 4


class UsageError(AttrDiffError, ValueError):
    exit_code = 2


class ConfigurationError(AttrDiffError, ValueError):
    exit_code = 2


class DegenerateDirectionError(AttrDiffError, ValueError):
    exit_code = 3


class ValidationError(AttrDiffError):
    exit_code = 3


class ProbeTrainingError(ValidationError):
    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = dict(metrics or {})


class ScheduleMismatchError(AttrDiffError, ValueError):
    exit_code = 3


class TrainingAbort(AttrDiffError, RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = dict(record or {})
