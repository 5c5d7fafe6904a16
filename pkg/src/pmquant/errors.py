"""Exception hierarchy shared by every pmquant module.

The CLI maps these onto exit codes, so the grouping matters: anything
derived from :class:`DataError` is a problem with the inputs (exit 2),
:class:`ConfigError` is a usage problem (exit 1), everything else is a
runtime failure (exit 3).
"""


class PMQuantError(Exception):
    pass


class ConfigError(PMQuantError, ValueError):
    pass


class DomainError(PMQuantError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NondifferentiableError(DomainError):
    pass


class DataError(PMQuantError):
    pass


class ShapeError(DataError, ValueError):
    pass


class EmptySampleError(DataError, ValueError):
    pass


class MetadataError(DataError, ValueError):
    pass


class DegenerateBandError(DataError, ValueError):
    def __init__(self, band, lo, hi):
        super().__init__(f"band {band!r} is degenerate: min={lo!r} max={hi!r}")
        self.band = band


class SizeError(DataError, ValueError):
    pass


class CheckpointFormatError(DataError):
    pass


class IncompatibleCheckpointError(DataError):
    pass


class DivergenceError(PMQuantError, RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"training diverged at step {step}: loss={value}")
        self.step = step
