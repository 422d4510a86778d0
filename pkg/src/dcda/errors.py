"""Exception hierarchy shared across the package."""


class DcdaError(Exception):
    """Base class for all package errors."""


class ShapeError(DcdaError, ValueError):
    pass


class RangeError(DcdaError, ValueError):
    pass


class NonFiniteError(DcdaError, ArithmeticError):
    pass


class StateError(DcdaError, RuntimeError):
    pass


class LayoutError(DcdaError, OSError):
    pass


class LabelError(DcdaError, ValueError):
    pass


class ExhaustedError(DcdaError, LookupError):
    pass


class DegenerateError(DcdaError, ValueError):
    pass
