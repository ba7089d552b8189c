"""Exception taxonomy shared across the pipeline."""


class StitchPipeError(Exception):
    """Base class for all package-specific failures."""


class InvalidInputError(StitchPipeError, ValueError):
    """Input data violates a documented precondition (non-finite values, bad shapes)."""


class DegenerateGeometryError(StitchPipeError, ValueError):
    """Geometric fit or warp is ill-posed (coincident points, zero scale)."""


class ContractError(StitchPipeError, ValueError):
    """A model-interface contract was violated (dimension/resolution mismatch)."""


class InvariantViolationError(StitchPipeError, ValueError):
    """A structural invariant does not hold (e.g. mask not contained in its dilation)."""


class DivergenceError(StitchPipeError, RuntimeError):
    """An optimization produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class ConfigError(StitchPipeError, ValueError):
    """Pipeline configuration is invalid or references missing files."""


class DependencyError(StitchPipeError, RuntimeError):
    """A stage was run before its upstream artifacts exist."""

    def __init__(self, stage: str, missing: str):
        self.stage = stage
        self.missing = missing
        super().__init__(f"stage '{stage}' requires missing upstream '{missing}'")


class StaleCacheError(StitchPipeError, RuntimeError):
    """A cached artifact no longer matches the hash of its inputs."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"stale cache for stage '{stage}'" + (f": {detail}" if detail else ""))


class CertificationError(StitchPipeError, RuntimeError):
    """Toy backend build failed its certification bounds."""
