"""Exception hierarchy. CLI exit codes map onto the last three classes."""


class DcnasError(Exception):
    """Base class for package errors."""


class ShapeError(DcnasError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DcnasError, RuntimeError):
    """A caller violated an API precondition."""


class ConfigurationError(DcnasError, ValueError):
    """Invalid static configuration: even kernels, indivisible head counts, bad presets."""


class DataError(DcnasError, ValueError):
    """Malformed or infeasible data, or a missing/incompatible artifact."""


class NumericError(DcnasError, ArithmeticError):
    """Non-finite loss or parameters during optimisation."""
