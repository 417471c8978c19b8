"""Exception types shared across the package."""


class XmclError(Exception):
    """Base class for all package errors."""


class DimensionError(XmclError, ValueError):
    pass


class DegenerateInputError(XmclError, ValueError):
    pass


class StateError(XmclError, RuntimeError):
    pass


class NumericError(XmclError, ArithmeticError):
    def __init__(self, message, param=None, index=None):
        super().__init__(message)
        self.param = param
        self.index = index


class PolicyViolationError(XmclError):
    pass


class EmptyScopeError(XmclError, LookupError):
    pass


class MissingEmbeddingError(XmclError, KeyError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, message, batch_ids=None, dump_path=None):
        super().__init__(message)
        self.batch_ids = batch_ids or []
        self.dump_path = dump_path


class FormatError(XmclError, ValueError):
    """Malformed on-disk artifact. ``code`` identifies the failure class."""

    code = "format"


class BadMagicError(FormatError):
    code = "bad-magic"


class VersionMismatchError(FormatError):
    code = "bad-version"


class TruncatedFileError(FormatError):
    code = "truncated"


class NonFiniteError(FormatError):
    code = "non-finite"

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DuplicateIdError(FormatError):
    code = "duplicate-id"
