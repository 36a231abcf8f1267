"""Exception hierarchy shared across the toolkit."""


class CodapError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CodapError, ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class DataError(CodapError, ValueError):
    """Malformed or out-of-range input data."""


class DivergenceError(CodapError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss, fold=None):
        self.epoch = epoch
        self.loss = loss
        self.fold = fold
        where = f"fold {fold}, " if fold is not None else ""
        super().__init__(f"training diverged ({where}epoch {epoch}): loss={loss}")


class SingularSystemError(CodapError, ArithmeticError):
    """Normal equations are not positive definite."""
