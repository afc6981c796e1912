"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, DataError and its
subclasses exit 2, everything else raised from this hierarchy exits 3.
"""


class TermspotError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TermspotError):
    """Tensor arguments have inconsistent or unsupported dimensions."""


class GradientError(TermspotError):
    """A parameter is missing the gradient an optimizer step needs."""


class DataError(TermspotError):
    """A file or record failed parsing or invariant validation."""


class CheckpointError(DataError):
    """A checkpoint file is unreadable or has an incompatible version."""


class EvalError(DataError):
    """An evaluation request cannot be satisfied (e.g. no scored queries)."""


class SamplingError(TermspotError):
    """Training example sampling exhausted its resampling budget."""


class TrainingDiverged(TermspotError):
    """Training hit a non-finite loss and aborted."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step
