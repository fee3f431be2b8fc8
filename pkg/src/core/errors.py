"""
Error types shared across the package.
"""


class CoordGroundError(Exception):
    """Base class for every error raised by CoordGround."""


class ConfigError(CoordGroundError, ValueError):
    """Invalid or unreadable run configuration."""


class GeometryError(CoordGroundError, ValueError):
    """Box or canvas violating its invariants (malformed annotation)."""


class SceneGenerationError(CoordGroundError, RuntimeError):
    """Placement or disambiguation failed after the bounded number of retries."""


class ExpressionParseError(CoordGroundError, ValueError):
    """Text outside the referring-expression template grammar."""


class ModelInputError(CoordGroundError, ValueError):
    """Tensor shape or sequence length outside the model's contract."""


class LossInputError(CoordGroundError, ValueError):
    """Empty masks, empty batches or negative loss weights."""


class TrainingDivergedError(CoordGroundError, RuntimeError):
    """Non-finite loss during optimisation."""


class StageOrderError(CoordGroundError, RuntimeError):
    """A training stage was started without its prerequisite checkpoint."""


class SplitOverlapError(CoordGroundError, RuntimeError):
    """Evaluation records also appear in the training split."""


class CheckpointFormatError(CoordGroundError, ValueError):
    """Checkpoint file with a bad header, version or tensor layout."""


class ArtifactExistsError(CoordGroundError, FileExistsError):
    """Refusing to overwrite an existing artifact without force."""
