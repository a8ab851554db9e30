"""Exception hierarchy shared across the package."""


class CakeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CakeError, ValueError):
    pass


class ContractError(CakeError, RuntimeError):
    """A caller violated a usage contract (e.g. backward on a non-scalar)."""


class DomainError(CakeError, ValueError):
    pass


class ConfigError(CakeError, ValueError):
    pass


class FormatError(CakeError, ValueError):
    """Malformed or inconsistent file contents."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(CakeError, ArithmeticError):
    """Non-finite values appeared during sample synthesis."""

    def __init__(self, minibatch: int, iteration: int, what: str = "loss"):
        super().__init__(
            f"non-finite {what} in synthesis mini-batch {minibatch} at iteration {iteration}"
        )
        self.minibatch = minibatch
        self.iteration = iteration
