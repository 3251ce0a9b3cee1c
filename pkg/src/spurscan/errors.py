"""Exception hierarchy. Every error raised on purpose derives from SpurscanError."""


class SpurscanError(Exception):
    pass


# pe_map
class NotPe(SpurscanError):
    pass


class Truncated(SpurscanError):
    pass


# nn
class TokenOutOfRange(SpurscanError):
    pass


class ShapeMismatch(SpurscanError):
    pass


class StaleCache(SpurscanError):
    pass


class NonFinite(SpurscanError):
    pass


class BadMagic(SpurscanError):
    pass


class ManifestMismatch(SpurscanError):
    pass


class TruncatedPayload(SpurscanError):
    pass


# scoring
class AllSkipped(SpurscanError):
    pass


# corpus
class BadHeader(SpurscanError):
    pass


class DuplicatePath(SpurscanError):
    pass


class BadLabel(SpurscanError):
    pass


# synth
class InconsistentSpec(SpurscanError):
    pass


class Diverged(SpurscanError):
    pass
