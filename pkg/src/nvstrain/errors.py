"""Exception types shared across the package."""


class NVStrainError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(NVStrainError, ValueError):
    """Non-finite or out-of-range physical parameter."""


class InvalidEnsembleError(NVStrainError, ValueError):
    """Orientation fractions that do not form a probability distribution."""


class InvalidSceneError(NVStrainError, ValueError):
    """Scene or acquisition description that cannot be rendered."""


class NumericalError(NVStrainError, ArithmeticError):
    """A numerical routine failed instead of producing a usable result."""


class ConfigError(NVStrainError, ValueError):
    """Scenario configuration violates the schema.

    ``path`` holds the dotted location of the offending field.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class StackFormatError(NVStrainError, ValueError):
    """Stack or fit-table file is corrupt or has an unknown version."""
