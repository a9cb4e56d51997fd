"""Exception types shared across the benchmark."""


class AmcBenchError(Exception):
    """Base class for all benchmark errors."""


class InvalidArgumentError(AmcBenchError, ValueError):
    """A caller-supplied value violates a precondition."""


class ShapeError(AmcBenchError, ValueError):
    """Tensor or dataset shapes are incompatible."""


class FormatError(AmcBenchError, ValueError):
    """A serialized artifact is malformed; message names the byte offset."""


class EmptyDatasetError(AmcBenchError, ValueError):
    """An operation received or produced a dataset with no examples."""


class NumericFaultError(AmcBenchError, FloatingPointError):
    """A NaN or Inf appeared where all values must be finite."""


class StateError(AmcBenchError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class MissingDependencyError(AmcBenchError, RuntimeError):
    """A required artifact (checkpoint, index set, adversarial set) is absent."""


class UsageError(AmcBenchError, ValueError):
    """Bad command line or configuration input; maps to exit code 1."""
