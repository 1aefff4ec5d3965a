"""Exception hierarchy shared by all modules."""


class DnnMutError(Exception):
    """Base class for every error raised by dnnmut."""


class ConfigError(DnnMutError, ValueError):
    """Invalid parameters or configuration."""


class DataError(DnnMutError, ValueError):
    """Malformed, empty or inconsistent input data."""


class DimensionError(DataError):
    """Input width does not match the network."""


class MutationError(DnnMutError, ValueError):
    """A mutation operator cannot be applied to the given target."""


class PoolBudgetError(DnnMutError):
    """Attempt budget ran out before enough mutants passed the quality gate."""

    def __init__(self, message, pool, stats):
        super().__init__(message)
        self.pool = pool
        self.stats = stats
