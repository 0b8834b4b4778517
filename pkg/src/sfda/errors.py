class SFDAError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(SFDAError, ValueError):
    pass


class NumericError(SFDAError, ArithmeticError):
    pass


class DegenerateClassError(NumericError):
    def __init__(self, k: int, weight: float):
        super().__init__(f"class {k} has total weight {weight:.3g}; centroid undefined")
        self.k = k


class JoinError(SFDAError, KeyError):
    def __str__(self):
        return str(self.args[0])
