"""Exception and warning types shared across the package."""


class ProtosegError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(ProtosegError, ValueError):
    """Operands have incompatible extents."""


class NonFiniteError(ProtosegError, FloatingPointError):
    """An operation produced NaN or Inf."""


class NoForegroundError(ProtosegError, ValueError):
    """Support mask has no foreground pixels at feature resolution."""


class NoBackgroundError(ProtosegError, ValueError):
    """No grid cell is background-dominant under the configured threshold."""


class FeatureFileError(ProtosegError, ValueError):
    """Base class for feature-file problems."""


class FeatureFileFormatError(FeatureFileError):
    """Wrong magic bytes or malformed header."""


class FeatureFileTruncatedError(FeatureFileError):
    """Payload shorter than the header promises."""


class FeatureFileNonFiniteError(FeatureFileError):
    """Payload contains NaN or Inf values."""


class CheckpointError(ProtosegError, ValueError):
    """Base class for parameter-checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or malformed checkpoint structure."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ends before its header promises."""


class ConfigError(ProtosegError, ValueError):
    """Invalid or unknown configuration keys/values."""


class TrainingAbortedError(ProtosegError, RuntimeError):
    """Training hit a NaN loss; carries the step and last good checkpoint."""

    def __init__(self, step, checkpoint_path):
        self.step = step
        self.checkpoint_path = checkpoint_path
        where = checkpoint_path if checkpoint_path is not None else "<none written>"
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {where}"
        )


class NumericsWarning(UserWarning):
    """Base class for flagged-but-recoverable numeric events."""


class ZeroNormWarning(NumericsWarning):
    """Cosine similarity saw a zero-norm vector; fell back to 0."""


class OffTapeParameterWarning(NumericsWarning):
    """A parameter did not participate in the loss; gradient is zero."""


class ClusterCountWarning(NumericsWarning):
    """Requested more clusters than foreground points; count was reduced."""


class ProbabilityFloorWarning(NumericsWarning):
    """Probabilities were clamped to the floor before taking logs."""
