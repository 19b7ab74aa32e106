"""Exception types shared across the package."""


class MTRCError(Exception):
    """Base class for package errors."""


class ConfigurationError(MTRCError, ValueError):
    pass


class DimensionError(MTRCError, ValueError):
    pass


class NumericError(MTRCError, ArithmeticError):
    pass


class LabelError(MTRCError, ValueError):
    pass


class ParseError(MTRCError, ValueError):
    """Annotation file could not be parsed.

    Carries the offending path and 1-based line number when known.
    """

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class WeightFileError(MTRCError, IOError):
    pass


class AlignmentError(MTRCError, ValueError):
    """Predictions and annotations do not line up.

    ``missing`` lists the ``(video_id, frame_idx)`` pairs lacking a prediction.
    """

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class TrainingError(MTRCError, RuntimeError):
    def __init__(self, message, partition=None):
        super().__init__(message)
        self.partition = partition
