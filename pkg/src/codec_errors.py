"""
Exception hierarchy for the probabilistic codec.

The CLI maps these onto exit codes (3 for data problems, 4 for model mismatch).
"""


class CodecError(Exception):
    """Base class for all codec errors."""

    exit_code = 3


class DataError(CodecError):
    """Unreadable input, wrong dimensions, or I/O failure."""


class InvalidShapeError(CodecError, ValueError):
    """Array or tensor shapes do not satisfy an operation's contract."""


class RangeOverflowError(CodecError):
    """A quantised coefficient falls outside the coder alphabet."""


class SequencingError(CodecError):
    """Context requested before the data it depends on was decoded."""


class BitstreamError(CodecError):
    """Corrupt, truncated or unsupported container/model file."""


class ModelMismatchError(CodecError):
    """Bitstream was produced with a different model."""

    exit_code = 4


class ContractViolation(CodecError):
    """A caller broke a documented precondition (e.g. non-scalar loss)."""


class TrainingDivergedError(CodecError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, diagnostics: dict = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
