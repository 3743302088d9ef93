"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Inputs live on incompatible grids or violate a shape constraint (e.g. a non-monotone CDF)."""


class NumericalError(RuntimeError):
    """A computation produced a non-finite or otherwise unusable result."""


class NonConvergenceError(RuntimeError):
    """An iterative procedure hit its iteration cap."""
