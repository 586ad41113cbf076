"""Exception types shared across the package."""


class InvalidSpecError(ValueError):
    """A configuration or parameter value is outside its allowed range."""


class InvalidInputError(ValueError):
    """Data passed to an operation has the wrong shape, range or length."""


class LifecycleError(RuntimeError):
    """An object was used before it was built or trained."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""
