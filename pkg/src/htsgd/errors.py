"""Exception hierarchy shared by all modules."""


class HtsgdError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgumentError(HtsgdError, ValueError):
    pass


class CapacityError(HtsgdError):
    """A requested enumeration or exact computation exceeds its size cap."""


class EmptyInputError(HtsgdError, ValueError):
    pass


class DegenerateSampleError(HtsgdError, ValueError):
    pass


class NotContractiveError(HtsgdError):
    """The contraction condition (negative log-moment, or delta < 1) fails."""


class NoRootError(HtsgdError):
    """No sign change of the log-moment function below the exponent cap."""


class StabilityError(HtsgdError):
    """Closed form requested outside its validity region (sigma2 * mu >= 2)."""
