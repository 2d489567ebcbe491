class PyMimoException(Exception):
    def __init__(self, message):
        super().__init__(message)
        self.message = message


class ContractViolation(PyMimoException, ValueError):
    def __init__(self, message):
        super().__init__(message)


class SingularMatrixError(PyMimoException):
    def __init__(self, message, pivot=0.0):
        super().__init__(message)
        self.pivot = pivot


class DivergenceError(PyMimoException):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class CapacityError(PyMimoException):
    def __init__(self, message, candidates=None):
        super().__init__(message)
        self.candidates = candidates


class FormatError(PyMimoException):
    def __init__(self, message, offset=0):
        super().__init__(message)
        self.offset = offset


class NumericalError(PyMimoException):
    def __init__(self, message, layer=None, iteration=None):
        super().__init__(message)
        self.layer = layer
        self.iteration = iteration


class DegenerateSampleError(PyMimoException):
    def __init__(self, message):
        super().__init__(message)


class RangeError(PyMimoException):
    def __init__(self, message):
        super().__init__(message)
