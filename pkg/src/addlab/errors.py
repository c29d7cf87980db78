"""Exception hierarchy. Every domain failure derives from AddlabError."""


class AddlabError(Exception):
    pass


class GlyphError(AddlabError):
    pass


class CanvasTooSmall(AddlabError):
    pass


class PackedFormatError(AddlabError):
    pass


class BadMagic(PackedFormatError):
    pass


class VersionMismatch(PackedFormatError):
    pass


class TruncatedFile(PackedFormatError):
    pass


class ChecksumMismatch(PackedFormatError):
    pass


class SplitError(AddlabError):
    pass


class ManifestError(AddlabError):
    pass


class SchemaMismatch(ManifestError):
    pass


class KeyOutOfRange(ManifestError):
    pass


class DuplicateKey(ManifestError):
    pass


class IncompleteCover(ManifestError):
    pass


class ShapeError(AddlabError):
    pass


class NonFiniteError(AddlabError):
    pass


class DivergenceError(NonFiniteError):
    pass


class CheckpointError(AddlabError):
    pass


class EmptyKeySet(AddlabError):
    pass
