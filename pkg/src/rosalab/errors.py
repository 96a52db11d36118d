"""Exception types shared across the package."""


class RosalabError(Exception):
    """Base class for all package errors."""


class ShapeError(RosalabError):
    """Operand shapes are invalid for the requested primitive."""


class NumericError(RosalabError):
    """An operation produced NaN or Inf."""


class ContractError(RosalabError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class ConfigError(RosalabError):
    """Invalid or inconsistent configuration."""


class InputError(RosalabError):
    """Invalid runtime input (bad token ids, empty sample, ...)."""


class IoError(RosalabError):
    """File could not be read or written; message carries the path."""


class ScoringError(RosalabError):
    """Layer scoring was attempted without the gradients it needs."""


class CheckpointError(RosalabError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic."""


class VersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CrcError(CheckpointError):
    """Checkpoint payload does not match its CRC-32 trailer."""


class TrainingAbort(RosalabError):
    """Training hit a non-finite loss; carries the step and last-good checkpoint."""

    def __init__(self, step: int, checkpoint: str | None, message: str = ""):
        self.step = step
        self.checkpoint = checkpoint
        detail = message or f"non-finite loss at step {step}"
        if checkpoint:
            detail += f" (last good checkpoint: {checkpoint})"
        super().__init__(detail)
