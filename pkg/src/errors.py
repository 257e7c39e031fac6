"""
Exception hierarchy. Library code raises these; only the CLI turns them
into exit codes (see src/main.py).
"""


class DuomodalError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 2


class UsageError(DuomodalError):
    exit_code = 1


class ConfigError(UsageError):
    """Unknown key, bad value or failed validation in a config document."""


class ContractError(DuomodalError):
    """A precondition of an operation does not hold."""


class DimensionError(ContractError):
    """Shapes that must agree do not."""


class VocabularyIndexError(ContractError, IndexError):
    """Token id outside [0, V)."""


class FormatError(DuomodalError):
    """Unreadable or malformed file (WAV, DMF1, DMC1, DMS1, JSON)."""


class TooShortError(ContractError):
    """Signal shorter than one analysis frame."""


class PipelineOrderError(ContractError):
    """Stage ran before its inputs exist, or store/epoch tags disagree."""


class CheckpointMismatchError(ContractError):
    """Checkpoint or store does not match the configured model or run."""


class NumericalError(DuomodalError):
    """NaN/Inf in gradients or parameters; training aborts."""

    exit_code = 3
