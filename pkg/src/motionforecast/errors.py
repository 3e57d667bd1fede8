"""Error types shared across the package."""


class NumericalError(ArithmeticError):
    """A numerically degenerate input (singular covariance, failed Cholesky)."""


class ParseError(ValueError):
    """Malformed skeleton/motion/config text; carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
