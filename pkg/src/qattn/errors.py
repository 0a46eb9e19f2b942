"""Exception types shared across the package."""


class QuantizationError(ValueError):
    """Raised when a value cannot be quantized (non-finite or out of range)."""


class ConfigError(ValueError):
    """Raised for invalid or contradictory configuration."""


class TensorFileError(IOError):
    """Base class for tensor file format errors."""


class BadMagicError(TensorFileError):
    pass


class DimensionOverflowError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass
