"""Temporally consistent semantic video editing via generator fine-tuning.

Pipeline stages: align -> invert -> tune -> edit -> stitch -> compose, plus
identity-consistency metrics. Model access goes through a narrow backend
interface; a fully self-contained toy backend makes the whole pipeline
runnable and testable on a laptop.
"""
from .errors import (
    CertificationError,
    ConfigError,
    ContractError,
    DegenerateGeometryError,
    DependencyError,
    DivergenceError,
    InvalidInputError,
    InvariantViolationError,
    StaleCacheError,
    StitchPipeError,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "CertificationError",
    "ConfigError",
    "ContractError",
    "DegenerateGeometryError",
    "DependencyError",
    "DivergenceError",
    "InvalidInputError",
    "InvariantViolationError",
    "StaleCacheError",
    "StitchPipeError",
]
