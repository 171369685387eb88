"""Exception taxonomy shared by all stereoqa modules."""


class StereoQaError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(StereoQaError):
    """A caller violated a documented precondition (shapes, ranges, sizes)."""


class NumericError(StereoQaError):
    """A computation produced non-finite values or failed to converge."""


class DegenerateDataError(StereoQaError):
    """Input data carries no usable signal (zero variance, constant samples)."""


class FormatError(StereoQaError):
    """A file or byte stream does not match its documented format."""


class ParseError(FormatError):
    """A text record could not be parsed; carries the offending line number."""

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


class ResolutionError(StereoQaError):
    """Referenced resources (image paths) could not be resolved."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class CheckpointError(FormatError):
    """A checkpoint file is incompatible with the current architecture."""
