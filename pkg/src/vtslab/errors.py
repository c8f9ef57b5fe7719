"""Exception types shared across vtslab."""


class VtsLabError(Exception):
    pass


class DimensionError(VtsLabError, ValueError):
    pass


class InvalidHyperparameterError(VtsLabError, ValueError):
    pass


class InvalidArgumentError(VtsLabError, ValueError):
    pass


class EmptyInputError(VtsLabError, ValueError):
    pass


class NonFiniteError(VtsLabError, FloatingPointError):
    pass


class OracleFailureError(VtsLabError, ArithmeticError):
    pass


class UsageError(VtsLabError, RuntimeError):
    pass


class InvariantViolation(VtsLabError, AssertionError):
    pass


class ValidationError(VtsLabError, ValueError):
    pass


class TrainingDiverged(VtsLabError, FloatingPointError):
    pass
