class ContractError(ValueError):
    """A precondition of an operation was violated (shapes, ranges, geometry)."""


class WindowSizeError(ContractError):
    """Map height or width is not divisible by the window side."""


class WeightsMismatch(ContractError):
    """A weights mapping lacks a parameter or carries an unknown one."""
