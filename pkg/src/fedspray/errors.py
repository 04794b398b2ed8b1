"""Exception hierarchy shared by all fedspray modules.

Config problems and data problems are kept distinct because the CLI maps
them to different exit codes (2 and 3 respectively).
"""


class FedsprayError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FedsprayError):
    """Operands have incompatible dimensions."""


class ContractError(FedsprayError):
    """A caller violated a documented precondition."""


class ConfigError(FedsprayError):
    """A configuration value or file is invalid."""


class DataError(FedsprayError):
    """Base class for problems with input data files or graphs."""


class ParseError(DataError):
    """A data file could not be parsed.

    Carries the 1-based line number where parsing failed.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    """Parsed data violates a structural rule (e.g. edge symmetry)."""


class EmptyInputError(FedsprayError):
    """An operation received an input with no usable elements."""


class DegenerateInputError(FedsprayError):
    """An input is structurally degenerate for the requested operation."""


class UndefinedHomophilyError(FedsprayError):
    """Homophily was requested for an isolated node."""
