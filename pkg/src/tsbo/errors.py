"""Exception types raised across the package."""


class TsboError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(TsboError):
    pass


class NonFinite(TsboError):
    pass


class DegenerateInput(TsboError):
    """Raised when data carry no spread to fit (e.g. identical labels)."""


class ChainStuck(TsboError):
    """Raised when an MCMC chain accepts nothing during burn-in."""


class AcquisitionFailure(TsboError):
    pass


class ConfigError(TsboError):
    pass
