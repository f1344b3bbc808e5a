"""Monte Carlo laboratory for heavy tails in online and offline SGD."""

from htsgd.errors import (
    CapacityError,
    DegenerateSampleError,
    EmptyInputError,
    HtsgdError,
    InvalidArgumentError,
    NoRootError,
    NotContractiveError,
    StabilityError,
)
from htsgd.rng import RngStream, derive_seed

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "DegenerateSampleError",
    "EmptyInputError",
    "HtsgdError",
    "InvalidArgumentError",
    "NoRootError",
    "NotContractiveError",
    "RngStream",
    "StabilityError",
    "derive_seed",
]
