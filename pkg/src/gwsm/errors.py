"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class DataError(ValueError):
    """On-disk data (manifest, image file, checkpoint) is malformed."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf where finite values are required."""
