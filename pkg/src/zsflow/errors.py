"""Exception hierarchy shared by all zsflow modules.

The CLI maps these onto its exit-code contract: configuration problems
exit 2, bad input files exit 3, numerical divergence exits 4.
"""


class ZsflowError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ZsflowError):
    """Invalid settings or incompatible shapes supplied by the caller."""


class InputDataError(ZsflowError):
    """A data file failed validation (parse error, bad value, bad split)."""


class StateError(ZsflowError):
    """An operation was called out of order (e.g. backward before forward)."""


class TrainingDivergenceError(ZsflowError):
    """A training or evaluation computation produced non-finite numbers."""


class MiningError(TrainingDivergenceError):
    """Boundary-sample mining diverged; the message names the step index."""
