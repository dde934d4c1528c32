"""Exception types shared across the package."""


class PinchbeamError(Exception):
    """Base class for all package-specific errors."""


class InvalidConfigError(PinchbeamError):
    """A configuration value violates its documented range or relationship."""


class ConstraintViolationError(PinchbeamError):
    """An antenna layout breaks a placement constraint (gap or region bound)."""


class SingularityError(PinchbeamError):
    """Degenerate geometry (user on top of an antenna) or a singular linear system."""


class DegenerateInputError(PinchbeamError):
    """An input is identically zero where a direction is required (e.g. zero precoder)."""


class RankDeficientError(PinchbeamError):
    """Effective channel matrix is rank deficient; zero-forcing is undefined."""


class OracleIneligibleError(PinchbeamError):
    """Requested brute-force search exceeds the cost guard (K*N <= 2, M = 1)."""


class IncompatibleCheckpointError(PinchbeamError):
    """Checkpoint contents do not match the requested configuration."""


class DivergenceError(PinchbeamError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index
