"""Exception hierarchy shared by all simulator modules."""


class FedProfError(Exception):
    """Base class for every error raised by the package."""


class SpecificationError(FedProfError, ValueError):
    """An invalid model specification."""


class ContractError(FedProfError, ValueError):
    """Inputs violate an operation's preconditions (shapes, emptiness, sizes)."""


class ConfigError(FedProfError, ValueError):
    """Invalid or inconsistent configuration.

    ``key_path`` names the offending configuration entry when known.
    """

    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class NumericError(FedProfError, ArithmeticError):
    """Non-finite loss or gradient. ``payload`` carries diagnostics."""

    def __init__(self, message, payload=None):
        self.payload = dict(payload or {})
        super().__init__(message)


class DomainError(FedProfError, ValueError):
    """Argument outside the mathematical domain of a function."""


class StalenessError(FedProfError):
    """Two profiles produced by different global-model versions were compared."""


class FormatError(FedProfError, ValueError):
    """Malformed serialized profile."""


class SamplingError(FedProfError, ValueError):
    """Weighted sampling is impossible (e.g. all weights zero)."""


class DegenerateError(FedProfError, ValueError):
    """A computation has no meaningful answer (zero variance, zero divergence)."""


class CapabilityError(FedProfError):
    """A backend lacks an operation the requested mode needs."""
