"""Exception hierarchy.

The CLI maps these to exit codes: DecodeError -> 3, ValidationError -> 4,
StoreIntegrityError -> 5 (usage errors exit 2 via argparse).
"""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ZeroVectorError(EngineError):
    """A vector with near-zero norm reached a cosine computation."""


class EmptyMatrixError(EngineError):
    """An operation that needs at least one row got an empty matrix."""


class EmptyQuestionError(EngineError):
    """A question record carries no query tokens."""


class InvalidGeometryError(EngineError):
    """Model geometry violates its invariants (counts, S < P, C = H*D)."""


class LengthMismatchError(EngineError):
    """Two score vectors that must align have different lengths."""


class NoSegmentsError(EngineError):
    """No segment-level candidates exist to derive a global query from."""


class ValidationError(EngineError):
    """A decoded or constructed record violates the ingestion contract."""


class ShapeMismatchError(ValidationError):
    """A tensor's shape disagrees with the plan or geometry."""


class MissingBlockError(ValidationError):
    """A block required by the plan (or referenced by a result) is absent."""


class DuplicateBlockError(ValidationError):
    """The same block id appears twice in one record."""


class UnknownBlockError(ValidationError):
    """A block id does not exist under the plan or in the store."""


class OutOfOrderSegmentError(ValidationError):
    """A segment arrived with an index ahead of the next expected one."""


class DuplicateSegmentError(ValidationError):
    """A segment with an already-ingested index arrived again."""


class LabelMismatchError(ValidationError):
    """Ground-truth labels do not cover the evaluated questions."""


class DecodeError(EngineError):
    """Base class for wire/manifest decoding failures."""


class BadMagicError(DecodeError):
    """Leading magic bytes do not identify a known format."""


class VersionMismatchError(DecodeError):
    """Format version differs from the one this build reads."""


class TruncatedFileError(DecodeError):
    """The buffer ends before a complete structure could be read."""


class LengthOverflowError(DecodeError):
    """A declared length field exceeds the bytes actually available."""


class FormatError(DecodeError):
    """Structurally invalid content (unknown tags, inconsistent framing)."""


class StoreIntegrityError(EngineError):
    """Persisted store state fails an integrity check."""


class ChecksumFailureError(StoreIntegrityError):
    """A stored block's checksum does not match its bytes."""
