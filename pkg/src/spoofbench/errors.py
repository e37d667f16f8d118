"""Exception types shared across the package."""


class SpoofbenchError(Exception):
    """Base class for all errors raised by this package."""


class MalformedWavError(SpoofbenchError):
    """WAV container could not be parsed (bad RIFF header, truncated chunks)."""


class UnsupportedWavError(SpoofbenchError):
    """WAV parsed fine but uses an encoding we refuse (stereo, non-PCM, != 16 bit)."""


class LengthError(SpoofbenchError):
    """A waveform length precondition was violated (clip/pad bounds, model input size)."""


class ConfigError(SpoofbenchError):
    """Invalid configuration: bad field values, unknown keys, unresolvable names."""


class NumericsError(SpoofbenchError):
    """Non-finite values appeared where the algorithm requires finite ones."""
