class PipelineError(Exception):
    """Base class for every error the pipeline raises on purpose."""

    exit_code = 1


class ShapeError(PipelineError, ValueError):
    def __init__(self, op, *shapes, detail=None):
        self.op = op
        self.shapes = tuple(tuple(s) if s is not None else None for s in shapes)
        rendered = " vs ".join(str(s) for s in self.shapes)
        message = f"{op}: shape mismatch {rendered}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DegenerateRotationError(PipelineError, ValueError):
    pass


class ConfigError(PipelineError):
    exit_code = 2


class UnknownProtocolError(ConfigError):
    pass


class NumericalError(PipelineError):
    exit_code = 3

    def __init__(self, message, component=None):
        self.component = component
        super().__init__(message)


class SequenceFormatError(PipelineError):
    pass


class TruncatedFileError(SequenceFormatError):
    pass


class ChecksumError(SequenceFormatError):
    pass


class SchemaVersionError(SequenceFormatError):
    pass


class SkeletonMismatchError(PipelineError):
    pass


class EmptyDatasetError(PipelineError):
    pass
