class DimensionError(ValueError):
    """Operand shapes are inconsistent."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """Non-finite values or a failed numerical procedure."""


class UsageError(ValueError):
    """Invalid user input at the command-line or configuration level."""


class SimulationBudgetExceeded(RuntimeError):
    """Too many simulator failures within one round."""
