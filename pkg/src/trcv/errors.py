"""Exception hierarchy shared across the pipeline.

The CLI maps :class:`DataError` to exit code 2 and everything else that
escapes a command to exit code 3.
"""


class DataError(Exception):
    """Input data is missing, malformed or inconsistent."""


class ManifestError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SaliencyError(DataError):
    """A saliency map could not be served for a frame."""


class DegenerateMapError(DataError):
    """A saliency map carries no usable foreground/background contrast."""


class DivergenceError(RuntimeError):
    def __init__(self, message, epoch=None, step=None):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} (epoch={epoch}, step={step})")
