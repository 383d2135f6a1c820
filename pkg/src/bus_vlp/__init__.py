"""Bottom-up patch summarization for vision-language pretraining on CPU."""

from .config import PAPER_PROFILE, RunConfig, build_config, keep_count, load_config, paper_config
from .errors import (
    BenchEnvironmentError,
    BusError,
    ConfigError,
    DataError,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
    StateError,
)
from .model import BUSModel, rng_streams
from .tensor import Tensor, no_grad

__all__ = [
    "PAPER_PROFILE",
    "RunConfig",
    "build_config",
    "keep_count",
    "load_config",
    "paper_config",
    "BenchEnvironmentError",
    "BusError",
    "ConfigError",
    "DataError",
    "DomainError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "StateError",
    "BUSModel",
    "rng_streams",
    "Tensor",
    "no_grad",
]
