"""Exception hierarchy shared by all darkflash modules."""


class DarkflashError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DarkflashError, ValueError):
    pass


class ChannelError(DarkflashError, ValueError):
    pass


class RangeError(DarkflashError, ValueError):
    """A setting falls outside the camera operating envelope."""


class DomainError(DarkflashError, ValueError):
    pass


class DegenerateError(DarkflashError, ValueError):
    """The problem has no well-defined answer (e.g. no data term anywhere)."""


class NumericError(DarkflashError, ArithmeticError):
    pass


class FormatError(DarkflashError):
    """A file on disk could not be parsed."""


class ManifestError(DarkflashError):
    pass


class IncompleteMeteringError(DarkflashError):
    pass


class FrameRenderError(DarkflashError):
    """Rendering one frame of a capture plan failed; ``spec`` names the frame."""

    def __init__(self, message, spec=None):
        super().__init__(message)
        self.spec = spec
