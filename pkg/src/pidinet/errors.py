"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """An operation parameter is out of its valid range."""


class ConfigError(ValueError):
    """Invalid architecture configuration."""


class ConfigParseError(ConfigError):
    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} at position {position}"
        super().__init__(message)


class ConfigLengthError(ConfigError):
    def __init__(self, length, expected=16):
        self.length = length
        self.expected = expected
        super().__init__(f"config expands to {length} blocks, expected {expected}")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient in parameter block '{name}'")


class NonFiniteLossError(FloatingPointError):
    pass


class DegenerateMapWarning(RuntimeWarning):
    """Every pixel of an edge map was excluded from the loss."""


class ModelFormatError(ValueError):
    pass


class ModelCorruptionError(ModelFormatError):
    pass


class ModelConsistencyError(ModelFormatError):
    pass


class DataError(ValueError):
    """Missing, unpaired or undecodable data files."""
