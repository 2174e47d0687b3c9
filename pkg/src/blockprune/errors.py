"""Exception types shared across the toolkit."""


class BlockPruneError(Exception):
    """Base class for all toolkit errors."""


class ArchitectureError(BlockPruneError):
    """Unsupported model family or unrealizable depth/width parameters."""


class SurgeryError(BlockPruneError):
    """Illegal prune request (id out of range or not prunable)."""


class ShapeMismatchError(BlockPruneError):
    """Input batch does not match the graph's declared input shape."""


class DataError(BlockPruneError):
    """Missing or corrupt dataset files."""


class ProbeError(BlockPruneError):
    """Probe construction, training, or evaluation failure."""


class TrainingDivergedError(BlockPruneError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class ConfigError(BlockPruneError):
    """Invalid run configuration."""
