"""Exception hierarchy shared across the toolchain."""


class SketchForgeError(Exception):
    """Base class for all toolchain errors."""


class GeometryError(SketchForgeError):
    """Degenerate or mismatched geometry: zero-extent boxes, raster size mismatch."""


class EmptyAnswerError(SketchForgeError):
    """A detection answer was requested for an empty box list."""


class UnparseableCountError(SketchForgeError):
    """No integer could be extracted from a counting answer."""


class UnparseableSbirError(SketchForgeError):
    """A retrieval answer carried neither token log-probabilities nor yes/no text."""


class EmptySketchError(SketchForgeError):
    """A stroke map with no strokes reached a stage that requires at least one."""


class EmptyPoolError(SketchForgeError):
    """A sketch class pool was requested with zero total availability."""


class MissingScoreError(SketchForgeError):
    """A retrieval score matrix is missing (query, gallery) entries."""


class SampleGenerationError(SketchForgeError):
    """An instruction sample could not be generated from the given material."""


class ValidationError(SketchForgeError):
    """Invalid configuration or input files; maps to CLI exit code 2."""
