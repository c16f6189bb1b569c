"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Bad shapes, ids or configuration values."""


class NumericFaultError(ArithmeticError):
    """A forward value or gradient became non-finite."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite value produced by {op}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DataError(ValueError):
    """Unreadable, malformed or empty interaction data."""
