"""Exception types shared across the package."""


class ZtransError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ZtransError, ValueError):
    """Input violates an operation's precondition (non-finite, asymmetric, ...)."""


class DegenerateInputError(ZtransError, ValueError):
    """Input is well-formed but too degenerate for the requested computation."""


class SingularityError(ZtransError, ArithmeticError):
    """A covariance or system matrix is singular."""


class ShapeError(ZtransError, ValueError):
    """Operand shapes are incompatible for a primitive."""


class ContractError(ZtransError, RuntimeError):
    """A call-site contract (scalar root, table size, ...) was broken."""


class InvalidTagError(ZtransError, KeyError):
    """A language tag is unknown to the model or dataset."""

    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class FormatError(ZtransError, ValueError):
    """A persisted file is malformed, truncated, or of the wrong version."""


class ConfigMismatchError(ZtransError, ValueError):
    """Persisted tensors disagree with the shapes implied by a config."""


class ConfigError(ZtransError, ValueError):
    """An experiment configuration failed validation."""


class DivergenceError(ZtransError, RuntimeError):
    """Training produced a non-finite loss."""
