"""Exception hierarchy shared across the package."""


class GrpFedError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GrpFedError):
    """Invalid configuration: bad shapes, out-of-range fields, unknown ids."""


class DataError(GrpFedError):
    """Malformed or unusable input data."""


class NumericalError(GrpFedError):
    """Training produced a non-finite loss or gradient."""


class RoundAbort(GrpFedError):
    """A federated round failed; state was rolled back to the round start."""
