"""
Log-Density Model Contract
Defines the interface every model implements for the sampler.
"""

import logging
from abc import ABC, abstractmethod
from typing import Dict, Tuple

import numpy as np

from src.inference.parameters import ParameterSpace

Values = Dict[str, object]


class LogDensityModel(ABC):
    """
    Base class for all sampled models.

    Subclasses declare a ParameterSpace and implement the log posterior over
    constrained values together with its gradient; transforms and Jacobians
    are handled here. Instances must be safe to evaluate from several chains
    at once (data is read-only after construction).
    """

    name: str = "model"

    def __init__(self, space: ParameterSpace):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.space = space

    @abstractmethod
    def log_density_constrained(self, values: Values) -> Tuple[float, Values]:
        """Log density (up to a constant) and gradient over constrained values."""

    def log_density(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        """Log density and gradient with respect to the unconstrained vector."""
        values = self.space.constrain(z)
        lp, grad_constrained = self.log_density_constrained(values)
        log_jac, grad_jac = self.space.log_jacobian(z)
        grad = self.space.chain_rule(z, grad_constrained) + grad_jac
        return lp + log_jac, grad

    def sample_prior(self, rng: np.random.Generator) -> Values:
        """Draw constrained values from the prior."""
        raise NotImplementedError(f"{self.__class__.__name__} has no prior sampler")

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        """Unconstrained starting point: a prior draw, or Uniform(-2, 2) if unavailable."""
        try:
            return self.space.unconstrain(self.sample_prior(rng))
        except NotImplementedError:
            return rng.uniform(-2.0, 2.0, size=self.space.dim)

    def generated_quantities(self, values: Values) -> Values:
        """Derived quantities stored alongside each draw."""
        return {}

    def prior_summary(self) -> Dict[str, Tuple[float, float]]:
        """Prior (location, scale) per parameter, for provenance manifests."""
        return {}
