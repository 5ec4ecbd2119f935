"""Exception hierarchy shared by every pipeline stage.

Each error carries an ``exit_code`` used by the command-line front-end:
2 input, 3 data, 4 shape, 5 gallery.
"""


class PipelineError(Exception):
    exit_code = 2


class NonFinite(PipelineError, ValueError):
    exit_code = 3


class NotSymmetric(PipelineError, ValueError):
    exit_code = 4


class NotPositiveDefinite(PipelineError, ValueError):
    exit_code = 3


class FormatError(PipelineError, ValueError):
    exit_code = 2


class BadMagic(FormatError):
    pass


class Truncated(FormatError):
    pass


class MaxvalUnsupported(FormatError):
    pass


class DimMismatch(PipelineError, ValueError):
    exit_code = 4


class ImageTooSmall(PipelineError, ValueError):
    exit_code = 2


class NoContour(PipelineError, ValueError):
    exit_code = 3


class TooFewSamples(PipelineError, ValueError):
    exit_code = 3


class NoValidTriplets(PipelineError, ValueError):
    exit_code = 3


class InsufficientWriters(PipelineError, ValueError):
    exit_code = 3


class DimensionTooLarge(PipelineError, ValueError):
    exit_code = 4

    def __init__(self, message, rank=None):
        super().__init__(message)
        self.rank = rank


class ZeroVector(PipelineError, ValueError):
    exit_code = 3


class KOutOfRange(PipelineError, ValueError):
    exit_code = 4


class EmptyGallery(PipelineError, ValueError):
    exit_code = 5
