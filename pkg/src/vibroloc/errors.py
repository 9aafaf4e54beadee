"""Exception taxonomy shared across the package.

Every error raised by vibroloc derives from VibrolocError so callers can catch
one base class at the CLI boundary.
"""


class VibrolocError(Exception):
    """Base class for all vibroloc errors."""


class ConfigError(VibrolocError):
    """Invalid or inconsistent configuration values."""


class IoFailure(VibrolocError):
    """Filesystem or serialization failure (missing file, bad container)."""


# --- audio container / record errors ---

class InvalidClip(VibrolocError):
    """Clip payload violates the multichannel-clip contract."""


class NotWav(IoFailure):
    """File is not a RIFF/WAVE container."""


class ChannelMismatch(IoFailure):
    """WAV channel count differs from the expected array size."""


class RateMismatch(IoFailure):
    """WAV sample rate differs from the expected rate."""


class TruncatedData(IoFailure):
    """WAV data chunk is shorter than its declared size."""


class MalformedRecord(IoFailure):
    """A manifest line failed to parse or validate."""


# --- signal / feature errors ---

class TooShort(VibrolocError):
    """Signal shorter than one analysis frame."""


class ClipTooShort(VibrolocError):
    """Clip too short for the requested trim window."""


class ZeroEnergy(VibrolocError):
    """A correlation input has exactly zero energy."""


class LengthMismatch(VibrolocError):
    """Paired sequences have different lengths."""


class ShapeMismatch(VibrolocError):
    """Array shape incompatible with the expected layout."""


class GeometryMismatch(VibrolocError):
    """Sensor layout inconsistent with the clip or model."""


class DegenerateStd(VibrolocError):
    """Normalization statistics contain a near-zero standard deviation."""


class DegenerateAxisPoint(VibrolocError):
    """Point lies on the cylinder axis; azimuth undefined."""


class EmptyInput(VibrolocError):
    """Empty collection where at least one element is required."""


class InvalidConfig(ConfigError):
    """Feature/front-end parameters out of range."""


# --- localization / simulation / mapping errors ---

class NoConfidentPairs(VibrolocError):
    """Fewer than three confident correlation peaks; cannot multilaterate."""


class MissingModality(VibrolocError):
    """Event lacks a modality the caller marked as required."""


class InvalidStrike(VibrolocError):
    """Strike specification violates its parameter ranges."""


class PlanInvalid(ConfigError):
    """Dataset or strike plan fails validation."""


class NoValidPoses(VibrolocError):
    """Strike planning found no collision-free poses in the sample region."""
