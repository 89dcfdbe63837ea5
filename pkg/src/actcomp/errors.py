"""Exception taxonomy shared by all actcomp modules."""


class ActcompError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ActcompError):
    """Tensor shapes are inconsistent or invalid."""


class ParameterError(ActcompError):
    """A numeric or configuration parameter is out of its valid domain."""


class DataError(ActcompError):
    """Input data violates a contract (NaN/Inf, label out of range, ...)."""


class FormatError(ActcompError):
    """A byte stream or file does not match its declared format."""


class LifecycleError(ActcompError):
    """An activation slot was consumed twice or never produced."""


class MemoryInfeasibleError(ActcompError):
    """No batch size >= 1 fits the configured memory budget."""


class SchemaError(ActcompError):
    """A CSV file does not carry one of the known header schemas."""
