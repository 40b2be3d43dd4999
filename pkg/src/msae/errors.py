"""Exception types shared across the toolkit."""


class MsaeError(Exception):
    """Base class for all toolkit-specific errors."""


class DegenerateBout(MsaeError):
    """First-frame skeleton is collapsed; normalization scale undefined."""


class SliceMisaligned(MsaeError):
    """Frame count is not divisible by the frames-per-slice setting."""


class ParseError(MsaeError):
    """A data file could not be parsed; message carries the line number."""


class ShapeError(MsaeError):
    """A record's joint/frame layout is inconsistent."""


class VersionMismatch(MsaeError):
    """Checkpoint format version differs from what this build writes."""


class ChecksumMismatch(MsaeError):
    """Checkpoint blob fails its CRC32 or size check."""


class EmptyVisible(MsaeError):
    """Masking left fewer visible frames than one slice."""


class PlanMismatch(MsaeError):
    """A mask plan does not match the sequence or token set it is applied to."""


class PositionOutOfRange(MsaeError):
    """A (frame, joint) position falls outside the positional tables."""


class EmptyLossSupport(MsaeError):
    """Masked-only loss requested but the mask indicator is all-false."""


class NonFiniteGradient(MsaeError):
    """A gradient (or loss) went non-finite; message names the tensor."""
