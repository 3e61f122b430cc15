"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""


class InvariantViolation(AssertionError):
    """A checked identity or bound failed; carries the offending sample."""

    def __init__(self, name: str, detail: dict | None = None):
        self.name = name
        self.detail = detail or {}
        super().__init__(f"{name}: {self.detail}")
