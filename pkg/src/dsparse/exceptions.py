"""Exception types raised across the engine."""


class DsparseError(Exception):
    """Base class for all engine errors."""


class ShapeMismatch(DsparseError, ValueError):
    pass


class ChannelOutOfRange(DsparseError, IndexError):
    pass


class IndexOutOfRange(DsparseError, IndexError):
    pass


class KTooLarge(DsparseError, ValueError):
    pass


class NonFiniteInput(DsparseError, ValueError):
    pass


class CapacityExceeded(DsparseError, RuntimeError):
    pass


class EmptyStats(DsparseError, ValueError):
    pass


class EmptyDataset(DsparseError, ValueError):
    pass


class GqaIncompatible(DsparseError, ValueError):
    """k-outlier calibration requested on a grouped-query model."""


class VocabOutOfRange(DsparseError, ValueError):
    pass


class LayerOutOfRange(DsparseError, IndexError):
    pass


class SlotBusy(DsparseError, RuntimeError):
    pass


class BufferNotReady(DsparseError, RuntimeError):
    """The prefetch pipeline broke its handoff contract. Always a bug."""


# DST1 file format errors


class DstFormatError(DsparseError, ValueError):
    pass


class BadMagic(DstFormatError):
    pass


class TruncatedFile(DstFormatError):
    pass


class UnknownDtypeCode(DstFormatError):
    pass


class NameCollision(DstFormatError):
    pass
