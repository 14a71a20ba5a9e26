"""Exception hierarchy."""


class PrefCalError(Exception):
    """Base class for all errors raised by prefcal."""


class InvalidInputError(PrefCalError, ValueError):
    pass


class InvalidParameterError(PrefCalError, ValueError):
    pass


class InvalidEnvironmentError(PrefCalError, ValueError):
    pass


class MismatchError(PrefCalError, ValueError):
    """A dataset was paired with an environment it was not generated from."""


class WrongOperationError(PrefCalError, TypeError):
    """A loss method was passed to the entry point for the other loss family."""


class ConfigurationError(PrefCalError, ValueError):
    pass


class DivergenceError(PrefCalError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step, message=None, beta=None):
        self.step = step
        self.beta = beta
        text = message or f"non-finite loss at step {step}"
        if beta is not None:
            text = f"beta={beta!r}: {text}"
        super().__init__(text)


class ProbeFailureError(PrefCalError, ArithmeticError):
    """A finite-difference probe evaluated to a non-finite value."""

    def __init__(self, coordinate, value):
        self.coordinate = coordinate
        self.value = value
        super().__init__(f"finite-difference probe at coordinate {coordinate} returned {value!r}")
