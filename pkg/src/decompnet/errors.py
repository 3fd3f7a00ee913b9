"""Exception hierarchy shared by every module."""


class DecompNetError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DecompNetError, ValueError):
    pass


class InvalidRankError(DecompNetError, ValueError):
    pass


class InvalidBudgetError(DecompNetError, ValueError):
    pass


class UnsupportedModelError(DecompNetError, ValueError):
    pass


class DegenerateInputError(DecompNetError, ValueError):
    pass


class ConfigError(DecompNetError, ValueError):
    pass


class ParseError(DecompNetError, ValueError):
    """Malformed dataset or checkpoint bytes; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalFailureError(DecompNetError, ArithmeticError):
    """Raised when a numerical routine cannot produce a trustworthy result.

    ``residual`` carries the off-diagonal residual for SVD non-convergence,
    ``layer`` and ``step`` locate the failure inside a network or training run.
    """

    def __init__(self, message, residual=None, layer=None, step=None):
        parts = [message]
        if layer is not None:
            parts.append(f"layer={layer}")
        if step is not None:
            parts.append(f"step={step}")
        if residual is not None:
            parts.append(f"residual={residual:.3e}")
        super().__init__(" ".join(parts))
        self.residual = residual
        self.layer = layer
        self.step = step
