"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """Invalid parameter combination (weights, horizons, cutoffs, ...)."""


class DimensionError(ValueError):
    """Mismatched signal/matrix dimensions."""


class OutOfRangeError(IndexError):
    """Requested window exceeds the available trajectory."""


class DegenerateDataError(RuntimeError):
    """Excitation data too poor to identify the requested predictor."""


class ContractViolationError(RuntimeError):
    """A refresh/update attempted to change problem structure that the
    cached factorization relies on."""
