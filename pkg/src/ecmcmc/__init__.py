"""Elastically coupled stochastic-gradient MCMC samplers and a virtual-time harness."""

from .errors import ContractError, NonFiniteError

__version__ = "0.1.0"

__all__ = ["ContractError", "NonFiniteError", "__version__"]
