"""Exception types shared across the package."""


class CateForgeError(Exception):
    pass


class InvalidInputError(CateForgeError, ValueError):
    """Input data or configuration failed validation."""


class DegenerateInputError(InvalidInputError):
    pass


class UnsupportedError(CateForgeError):
    pass


class ConvergenceError(CateForgeError, RuntimeError):
    """An iterative fit did not converge.

    ``iterations`` carries the number of iterations performed.
    """

    def __init__(self, message, iterations):
        super().__init__(message)
        self.iterations = iterations
