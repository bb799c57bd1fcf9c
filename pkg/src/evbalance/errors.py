"""Exception types shared across the package.

Validation failures (bad config, infeasible actions, shape mismatches) are kept
distinct from numerical/runtime failures so the CLI can map them to different
exit codes.
"""


class ValidationError(ValueError):
    """Input rejected before any computation ran (bad field, bad shape)."""


class ConstraintViolation(ValidationError):
    """An action violated its constraint domain beyond tolerance."""


class ScenarioError(ValidationError):
    """A scenario or run-config file failed parsing or semantic validation."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance.

    Carries the last iterate and the residual so callers can inspect how far
    the solve got.
    """

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite; training aborts loudly."""
