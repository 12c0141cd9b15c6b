"""Custom errors for trip_attention."""


class ConfigError(Exception):
    """Base exception for invalid configuration, reported by the command line with exit code 2."""

    pass


class DataError(Exception):
    """Base exception for invalid input data, reported by the command line with exit code 3."""

    pass


class ConfigInvalid(ConfigError):
    """Exception for a configuration value outside of its allowed range."""

    pass


class SpecSyntaxError(ConfigError):
    """Exception for a network specification file that cannot be parsed."""

    pass


class MappingInvalid(ConfigError):
    """Exception for a core mapping that does not assign every layer to exactly one core."""

    pass


class ScheduleIncomplete(ConfigError):
    """Exception for a quantization schedule that leaves weight layers unquantized."""

    pass


class DegenerateRegion(ConfigError):
    """Exception for a dynamic average pooling region with a non-positive kernel size."""

    pass


class BadMagic(DataError):
    """Exception for a binary file that does not start with the expected magic bytes."""

    pass


class TruncatedFile(DataError):
    """Exception for a binary file shorter than its header declares."""

    pass


class OutOfBoundsEvent(DataError):
    """Exception for an event outside of the stream geometry or with an invalid polarity."""

    pass


class EmptyStream(DataError):
    """Exception for an event stream without any events."""

    pass


class ShapeMismatch(DataError):
    """Exception for a tensor whose shape does not match the network specification."""

    pass


class LayerCountMismatch(DataError):
    """Exception for a weight file with a different number of layers than the network specification."""

    pass


class ValueOutOfRange(DataError):
    """Exception for a value that cannot be represented as a signed 4-bit integer."""

    pass


class AllZeroLayer(DataError):
    """Exception for quantizing a layer whose weights are all zero in strict mode."""

    pass


class DisconnectedLoss(DataError):
    """Exception for a loss that does not depend on any trainable parameter."""

    pass
