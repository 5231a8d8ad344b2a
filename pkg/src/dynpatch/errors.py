"""Exception types shared across the package."""


class DynPatchError(Exception):
    """Base class; ``exit_code`` is used by the CLI."""

    exit_code = 1


class ValidationError(DynPatchError, ValueError):
    exit_code = 2


class NotVisibleError(ValidationError):
    """The screen quad (or sign) of a frame is not visible."""


class EstimationError(DynPatchError, RuntimeError):
    exit_code = 4


class DifferentiabilityError(DynPatchError, TypeError):
    exit_code = 2


class DependencyError(DynPatchError, RuntimeError):
    """A pipeline stage is missing an upstream artifact."""

    exit_code = 3

    def __init__(self, stage: str, missing: str):
        self.stage = stage
        self.missing = missing
        super().__init__(f"missing {missing}; run stage `{stage}` first")
