"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class ToolPlanError(Exception):
    """Base class for all package errors."""


class ConfigError(ToolPlanError):
    """Invalid configuration: bad field values, unknown keys, size mismatches."""


class DataError(ToolPlanError):
    """Malformed or inconsistent input data (graphs, corpora, checkpoints)."""


class GraphFormatError(DataError):
    """Graph file does not parse or violates the file schema."""


class VocabCollisionError(DataError):
    """Two tools normalize to the same token surface form."""


class CheckpointError(DataError):
    """Checkpoint file is unreadable, truncated, or incompatible."""


class ContextLengthError(DataError):
    """Input sequence exceeds the model's maximum context."""


class NumericError(ToolPlanError):
    """Non-finite values where finite ones are required."""


class TrainingDivergedError(NumericError):
    """Training loss became non-finite or exceeded the divergence bound."""

    def __init__(self, stage: str, epoch: int, step: int, loss: float):
        super().__init__(
            f"training diverged in stage {stage!r} at epoch {epoch}, step {step}: "
            f"loss={loss!r}"
        )
        self.stage = stage
        self.epoch = epoch
        self.step = step
        self.loss = loss
