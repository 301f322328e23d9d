"""Exception hierarchy shared across the package."""


class DeskLMError(Exception):
    """Base class for all package errors."""


class DimensionError(DeskLMError, ValueError):
    pass


class ContractError(DeskLMError, ValueError):
    """A precondition of a public operation was violated."""


class ConfigError(ContractError):
    pass


class NonFiniteError(ContractError):
    """NaN or infinity reached a kernel that cannot handle it."""


class ContextOverflowError(ContractError):
    pass


class VocabularyError(DeskLMError, IndexError):
    pass


class EncodingError(DeskLMError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


class CheckpointError(DeskLMError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class CorpusError(DeskLMError):
    pass


class ValidationError(DeskLMError, ValueError):
    """Input records failed validation; ``problems`` lists the offending rows."""

    def __init__(self, message: str, problems: list[str] | None = None):
        super().__init__(message)
        self.problems = list(problems or [])


class UnlabelableError(DeskLMError):
    """A headline cannot be joined to a next-day return.

    ``reason`` is one of ``unknown_ticker``, ``price_gap``, ``out_of_range``.
    """

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or reason)
        self.reason = reason


class PriceSourceError(DeskLMError):
    pass


class RemoteError(DeskLMError):
    pass


class UnsupportedCapabilityError(DeskLMError):
    pass


class TrainingDivergedError(DeskLMError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics
