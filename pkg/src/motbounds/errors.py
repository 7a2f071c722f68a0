"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations


class MotError(Exception):
    """Base class for all errors raised by motbounds."""


class SchemaError(MotError, ValueError):
    """Input data or a cost specification does not match the expected schema."""


class CellCapError(MotError, ValueError):
    """A dense tensor would exceed the configured number of cells."""

    def __init__(self, required: int, allowed: int):
        self.required = int(required)
        self.allowed = int(allowed)
        super().__init__(
            f"dense tensor needs {self.required} cells, cap is {self.allowed}"
        )


class NumericalError(MotError, ArithmeticError):
    """A solver produced a non-finite intermediate value."""

    def __init__(self, message: str, iteration: int | None = None, margin: int | None = None):
        self.iteration = iteration
        self.margin = margin
        where = []
        if iteration is not None:
            where.append(f"iteration {iteration}")
        if margin is not None:
            where.append(f"margin {margin}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
