"""Exception hierarchy shared by every app in the toolkit."""


class DepthKitError(Exception):
    """Base class for all toolkit errors."""


class ArgError(DepthKitError):
    """An argument or precondition was violated."""


class BehindCamera(ArgError):
    """A point that should be projected lies on or behind the image plane."""


class MissingModality(ArgError):
    """A loss strategy needs a sensor stream the bundle does not carry."""

    def __init__(self, modality, message=None):
        self.modality = modality
        super().__init__(message or f'missing modality: {modality}')


class IoError(DepthKitError):
    """Reading or writing a file failed."""


class FormatError(DepthKitError):
    """On-disk data does not follow the expected layout."""


class ParseError(FormatError):
    """A text file could not be parsed; carries a 1-based line and column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f'line {line}, column {column or 1}: {message}'
        super().__init__(message)


class NumericError(DepthKitError):
    """A computation produced non-finite values or failed to converge."""

    def __init__(self, message, pixel=None):
        self.pixel = pixel
        if pixel is not None:
            message = f'{message} at pixel {tuple(int(p) for p in pixel)}'
        super().__init__(message)


class SingularError(NumericError):
    """Normal equations were rank deficient."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class DivergedError(DepthKitError):
    """The depth solver left the admissible loss range."""
