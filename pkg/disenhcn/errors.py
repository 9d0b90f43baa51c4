"""Exception hierarchy. Every error carries the process exit code the CLI returns for it."""


class DisenHCNError(Exception):
    exit_code = 2

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(DisenHCNError):
    """Bad flags, unknown config keys or invalid config values."""
    exit_code = 1


class DataError(DisenHCNError):
    """Malformed input, unknown ids, empty corpora, missing negatives."""
    exit_code = 2


class ShapeError(DisenHCNError, ValueError):
    exit_code = 2


class CheckpointError(DisenHCNError):
    exit_code = 2


class TrainingError(DisenHCNError):
    """Non-finite loss or gradient during optimization."""
    exit_code = 2


class VerificationError(DisenHCNError):
    exit_code = 3


class TapeError(DisenHCNError):
    """Misuse of a differentiation tape (non-scalar root, repeated backward)."""
    exit_code = 2
