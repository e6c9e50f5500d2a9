"""Exception types shared across the toolkit.

Every error raised on a contract violation derives from :class:`AnodetError`
so callers (and the CLI exit-code mapping) can distinguish toolkit errors
from programming bugs.
"""


class AnodetError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(AnodetError):
    """Invalid or inconsistent configuration."""


class VolumeFormatError(AnodetError):
    """Volume file or sidecar does not match the documented format."""


class AllBelowThreshold(AnodetError):
    """No voxel exceeds the crop threshold."""


class DomainMismatch(AnodetError):
    """Operation requires a different intensity domain."""


class OutOfRange(AnodetError):
    """Values fall outside the window bounds required by normalization."""


class ShapeMismatch(AnodetError):
    """Array shape does not match the contract."""


class LengthMismatch(AnodetError):
    """Vector length does not match the contract."""


class EmptyDataset(AnodetError):
    """Training or scoring was asked to run on an empty dataset."""


class NonFiniteLoss(AnodetError):
    """A loss or parameter became NaN/Inf during training."""


class MissingCheckpoint(AnodetError):
    """A required checkpoint directory is absent."""


class CheckpointError(AnodetError):
    """Checkpoint directory is present but malformed."""


class ResumeMismatch(AnodetError):
    """Checkpoint was produced under a different network spec or config."""


class UntrainedBundle(AnodetError):
    """Scoring requires all three networks with finalized checkpoints."""


class DegenerateLabels(AnodetError):
    """ROC/PR analysis needs at least one record of each class."""


class LesionOutOfBounds(AnodetError):
    """Requested lesion does not fit inside the phantom brain."""


class LockError(AnodetError):
    """Another command holds the output-directory lock."""
