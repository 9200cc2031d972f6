"""Exception types shared across the toolkit."""


class CagError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CagError):
    """Invalid or inconsistent configuration."""


class ShapeError(CagError):
    """Tensor shape does not match the expected contract."""


class DatasetLoadError(CagError):
    """Dataset source is missing, corrupt, or empty."""


class NoValidTargetError(CagError):
    """No target label distinct from the true label exists (needs >= 2 classes)."""


class SameTargetError(CagError):
    """Targeted attack requested with target equal to the true label."""


class ZeroPerturbationError(CagError):
    """A zero-norm perturbation cannot be rescaled to a fixed norm."""


class TrainingDivergedError(CagError):
    """Loss became non-finite during training."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CamUnsupportedError(CagError):
    """Model does not expose the GAP-head contract needed for activation maps."""


class EmptyEvalError(CagError):
    """Metric requested over an empty record set."""


class CodecMissingError(CagError):
    """No JPEG codec is available."""


class MissingArtifactError(CagError):
    """A referenced checkpoint or record file does not exist."""
