"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or contradictory configuration value."""


class FormatError(ValueError):
    """A binary or text artifact does not match its declared layout."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """File declares a format version this reader does not understand."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was complete."""


class FingerprintMismatchError(FormatError):
    """Stored weights were produced under a different architecture config."""


class NonFiniteGradientError(FloatingPointError):
    """A NaN or Inf appeared in a gradient during training."""


class ZeroVarianceError(ValueError):
    """A statistic requiring variance was asked of a constant sequence."""
