class CadsError(Exception):
    pass


class ValidationError(CadsError, ValueError):
    pass


class SizingError(CadsError, ValueError):
    pass


class StateError(CadsError, RuntimeError):
    pass


class DegenerateInputError(CadsError, ValueError):
    pass


class NumericalError(CadsError, FloatingPointError):
    pass
