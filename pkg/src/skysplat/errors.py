"""Exception hierarchy.

Every domain failure derives from :class:`SkysplatError` so the CLI can map
them to exit code 1 in one place.
"""


class SkysplatError(Exception):
    """Base class for domain errors."""


class EmptyScene(SkysplatError):
    pass


class MixedHandedness(SkysplatError):
    pass


class EmptyPointCloud(SkysplatError):
    pass


class NonFiniteInput(SkysplatError):
    pass


class ContextMismatch(SkysplatError):
    pass


class ShapeMismatch(SkysplatError):
    pass


class ModeMismatch(SkysplatError):
    pass


class AllMasked(SkysplatError):
    pass


class DegenerateDistances(SkysplatError):
    pass


class MissingClass(SkysplatError):
    pass


class NonFiniteLoss(SkysplatError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class DegenerateFit(SkysplatError):
    pass


class EmptyChunk(SkysplatError):
    pass


class MissingDepth(SkysplatError):
    pass


class MissingChunkModel(SkysplatError):
    pass


class EmptyVolume(SkysplatError):
    pass


class ParseError(SkysplatError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class ClassTagMissing(SkysplatError):
    pass
