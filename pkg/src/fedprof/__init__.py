"""Federated-learning simulator with representation-profile client selection."""

from .errors import FedProfError

__version__ = "0.1.0"
__all__ = ["FedProfError", "__version__"]
