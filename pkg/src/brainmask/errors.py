"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`BrainmaskError` and
carries an ``exit_code`` used by the command-line front end.
"""


class BrainmaskError(Exception):
    exit_code = 1


# --- NIfTI I/O -------------------------------------------------------------

class NiftiError(BrainmaskError, ValueError):
    exit_code = 4


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class UnsupportedFormat(NiftiError):
    pass


class Truncated(NiftiError):
    pass


class NonFiniteVoxel(NiftiError):
    pass


class UnrepresentableValue(NiftiError):
    pass


# --- geometry / preprocessing ---------------------------------------------

class VolumeError(BrainmaskError, ValueError):
    exit_code = 6


class SingularAffine(VolumeError):
    pass


class DegenerateIntensity(VolumeError):
    pass


class EmptyForeground(VolumeError):
    pass


class BBoxOutOfRange(VolumeError):
    pass


class ShapeMismatch(VolumeError):
    pass


class EmptyMask(VolumeError):
    pass


# --- network / weights ----------------------------------------------------

class NetworkError(BrainmaskError, ValueError):
    exit_code = 5


class ChannelMismatch(NetworkError):
    pass


class WeightShapeMismatch(NetworkError):
    pass


class MissingStats(NetworkError):
    pass


class OffsetOverlap(NetworkError):
    pass


class TruncatedBlob(NetworkError):
    pass


class UnknownDtype(NetworkError):
    pass


class FingerprintMismatch(NetworkError):
    pass


class KernelLargerThanWindow(BrainmaskError, ValueError):
    exit_code = 2


class DivergedLoss(BrainmaskError, RuntimeError):
    exit_code = 7
