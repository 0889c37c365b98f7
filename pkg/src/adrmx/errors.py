"""Exception types shared across the package."""


class AdrmxError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AdrmxError, ValueError):
    pass


class DegenerateInputError(AdrmxError, ValueError):
    pass


class ContractError(AdrmxError, ValueError):
    pass


class ConfigError(AdrmxError, ValueError):
    pass


class FormatError(AdrmxError, ValueError):
    pass


class LengthError(AdrmxError, ValueError):
    pass


class DivergenceError(AdrmxError, FloatingPointError):
    """A loss, gradient or activation became NaN/Inf."""

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term
