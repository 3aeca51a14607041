"""Graph-conditioned variational counterfactual prediction for perturbation data."""

from graphcf.errors import ConfigError, DataError, DivergenceError

__all__ = ["ConfigError", "DataError", "DivergenceError"]
__version__ = "0.1.0"
