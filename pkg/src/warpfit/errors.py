"""Exception types shared across the package.

Everything raised on purpose derives from WarpfitError so callers can
catch library failures without swallowing programming errors.
"""


class WarpfitError(Exception):
    """Base class for all errors raised deliberately by this package."""


class DimensionError(WarpfitError):
    """Array shapes are incompatible with the requested operation."""


class ParameterError(WarpfitError):
    """A scalar argument is outside its legal range or otherwise malformed."""


class TrainingError(WarpfitError):
    """Optimization cannot continue (for example a non-finite gradient)."""


class FormatError(WarpfitError):
    """A file does not conform to its on-disk format contract."""


class ConfigError(WarpfitError):
    """An experiment config file is malformed.

    ``line`` carries the 1-based line number when the failure is tied to a
    specific line of the file.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GenerationError(WarpfitError):
    """Synthetic data generation could not satisfy its constraints."""


class PipelineError(WarpfitError):
    """A pipeline stage failed; ``stage`` names the stage that raised.

    Artifacts written before the failure are left on disk.
    """

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
