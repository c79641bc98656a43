"""
This is a chunk of the exception classes shared by all modules.
Every error carries the exit code the command line reports for it.
"""


class DnrBenchError(Exception):
    """Base class of all errors raised by dnrBench.

    Attributes:
        kind (str): short machine-readable tag printed by the cli.
        exit_code (int): process exit code used by the cli.
    """
    kind = 'error'
    exit_code = 2


class DataError(DnrBenchError):
    """Bad or inconsistent input data."""
    kind = 'data'


class FormatError(DataError):
    """A file does not follow the expected binary layout."""
    kind = 'format'

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class LengthError(DataError):
    """A file payload is shorter than its header announces."""
    kind = 'length'


class ConsistencyError(DataError):
    """Two inputs that must agree (e.g. images and labels) do not."""
    kind = 'consistency'


class SizeError(DataError):
    """Not enough samples for the requested split."""
    kind = 'size'


class StratificationError(DataError):
    """A fold would miss at least one class."""
    kind = 'stratification'


class VersionError(DataError):
    """Unsupported model archive version."""
    kind = 'version'


class CorruptionError(DataError):
    """Model archive failed its integrity check."""
    kind = 'corruption'


class ConfigError(DataError):
    """Invalid run configuration."""
    kind = 'config'


class ShapeError(DnrBenchError, ValueError):
    """Array shapes do not compose."""
    kind = 'shape'


class NumericError(DnrBenchError):
    """A computation produced non-finite values."""
    kind = 'numeric'
    exit_code = 3


class ConvergenceError(NumericError):
    """SMO reached its iteration cap before satisfying the KKT conditions.

    Attributes:
        residual (float): maximal KKT violation at the last iteration.
    """
    kind = 'convergence'

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class TrainingError(NumericError):
    """SGD diverged.

    Attributes:
        epoch (int): epoch of the failing batch.
        batch (int): index of the failing batch within the epoch.
    """
    kind = 'training'

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class AttackNumericError(NumericError):
    """The attack objective became non-finite.

    Attributes:
        iterate (numpy.ndarray): the point where it happened.
        iteration (int): the PGD iteration.
    """
    kind = 'attack-numeric'

    def __init__(self, message, iterate=None, iteration=None):
        super().__init__(message)
        self.iterate = iterate
        self.iteration = iteration


class AttackTimeout(DnrBenchError):
    """A single-sample attack ran past its time budget."""
    kind = 'attack-timeout'
    exit_code = 3
