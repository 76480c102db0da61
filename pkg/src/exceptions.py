from typing import Optional

from src.constants import (
    EXIT_CONFIG_ERROR,
    EXIT_DATA_ERROR,
    EXIT_FAILURE,
    EXIT_NUMERICAL_ERROR,
)


class MeshSeedError(Exception):
    """Base class of every error raised by the toolkit."""

    exit_code = EXIT_FAILURE


# Configuration errors (exit code 2)

class ConfigurationError(MeshSeedError, ValueError):
    exit_code = EXIT_CONFIG_ERROR


class InvalidGeometryError(ConfigurationError):
    pass


class StageMismatchError(ConfigurationError):
    """Inputs of a stage disagree with each other or with the config."""

    def __init__(self, field: str, expected, found):
        self.field = field
        self.expected = expected
        self.found = found
        super().__init__(f"{field}: expected {expected}, found {found}")


# Data errors (exit code 3)

class DataError(MeshSeedError, ValueError):
    exit_code = EXIT_DATA_ERROR


class ParseError(DataError):
    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class InputValidationError(DataError):
    pass


class GeometryIntegrityError(DataError):
    pass


class MeshIntegrityError(DataError):
    pass


class QueryError(DataError):
    pass


class EmptyCloudError(DataError):
    pass


# Numerical errors (exit code 4)

class NumericalError(MeshSeedError, ArithmeticError):
    exit_code = EXIT_NUMERICAL_ERROR


class DomainError(NumericalError):
    pass


class EstimationError(NumericalError):
    pass


class DegeneracyError(NumericalError):
    pass


class DimensionalityError(NumericalError):
    pass


class ProjectionDomainError(NumericalError):
    pass


class DispersionTestInapplicable(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass
