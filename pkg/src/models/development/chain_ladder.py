"""
Chain-Ladder Body Model
Lognormal age-to-age development with a free factor per lag and a variance
that shrinks with development lag and grows with the previous loss.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from src.data.triangle import Triangle
from src.inference.model import LogDensityModel, Values
from src.inference.parameters import ParameterSpace, ParameterSpec
from src.models.densities import lognormal_terms, normal_prior
from src.models.development.config import DevConfig, DevelopmentCells, development_cells
from src.utils.errors import ModelEvaluationError

logger = logging.getLogger(__name__)

# (location, scale) before multiplying the scale by the prior scale factor
PRIORS = {
    'log_alpha': (0.0, 1.0),
    'gamma1': (-3.0, 0.25),
    'gamma2': (-1.0, 0.1),
}


@dataclass
class ChainLadderParams:
    """log_alpha[k] is the log factor from lag k+1 to lag k+2."""
    log_alpha: np.ndarray
    gamma1: float
    gamma2: float

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha)

    @classmethod
    def from_values(cls, values: Values) -> 'ChainLadderParams':
        return cls(
            log_alpha=np.atleast_1d(np.asarray(values['log_alpha'], dtype=float)),
            gamma1=float(values['gamma1']),
            gamma2=float(values['gamma2']),
        )

    def to_values(self) -> Values:
        return {'log_alpha': np.asarray(self.log_alpha, dtype=float),
                'gamma1': self.gamma1, 'gamma2': self.gamma2}


def cl_log_likelihood(
    p: ChainLadderParams, cells: DevelopmentCells, sigma_scale: float = 1.0
) -> Tuple[float, Values]:
    """Lognormal likelihood over the training cells and its gradient."""
    mu = p.log_alpha[cells.j - 2] + cells.log_y_prev
    log_var = p.gamma1 + p.gamma2 * cells.j + cells.log_y_prev + 2.0 * math.log(sigma_scale)
    lp, d_mu, d_log_var = lognormal_terms(cells.log_y, mu, log_var)

    grad_alpha = np.zeros_like(p.log_alpha)
    np.add.at(grad_alpha, cells.j - 2, d_mu)
    grad = {
        'log_alpha': grad_alpha,
        'gamma1': float(d_log_var.sum()),
        'gamma2': float((d_log_var * cells.j).sum()),
    }
    return float(lp.sum()), grad


def cl_log_prior(p: ChainLadderParams, prior_scale: float = 1.0) -> Tuple[float, Values]:
    lp, grad = 0.0, {}
    for name, value in (('log_alpha', p.log_alpha), ('gamma1', p.gamma1), ('gamma2', p.gamma2)):
        loc, scale = PRIORS[name]
        term, g = normal_prior(value, loc, scale * prior_scale)
        lp += term
        grad[name] = g
    return lp, grad


def cl_log_density(p: ChainLadderParams, t: Triangle, cfg: DevConfig) -> Tuple[float, Values]:
    """
    Posterior log density of the chain-ladder body.

    Args:
        p: Parameters on the constrained scale
        t: Training triangle
        cfg: Development settings (tau, prior scale, loss scale)

    Returns:
        (log density, gradient keyed by parameter name)
    """
    cells = development_cells(t, 2, cfg.tau, cfg.loss_scale)
    return _combine(p, cells, cfg)


def _combine(p: ChainLadderParams, cells: DevelopmentCells, cfg: DevConfig) -> Tuple[float, Values]:
    ll, g_ll = cl_log_likelihood(p, cells, cfg.sigma_scale)
    lp, g_lp = cl_log_prior(p, cfg.prior_scale)
    total = ll + lp
    if not np.isfinite(total):
        raise ModelEvaluationError("Non-finite chain-ladder density", {'log_likelihood': ll})
    return total, {name: g_ll[name] + g_lp[name] for name in g_ll}


def sample_cl_prior(cfg: DevConfig, n_dev_lags: int, rng: np.random.Generator) -> ChainLadderParams:
    k = cfg.prior_scale
    return ChainLadderParams(
        log_alpha=rng.normal(PRIORS['log_alpha'][0], PRIORS['log_alpha'][1] * k, size=n_dev_lags - 1),
        gamma1=float(rng.normal(PRIORS['gamma1'][0], PRIORS['gamma1'][1] * k)),
        gamma2=float(rng.normal(PRIORS['gamma2'][0], PRIORS['gamma2'][1] * k)),
    )


class ChainLadderModel(LogDensityModel):
    """Chain-ladder body fitted to lags 2..tau of one triangle."""

    name = "chain_ladder"

    def __init__(self, t: Triangle, cfg: DevConfig):
        cfg.validate_for(t.n_dev_lags)
        super().__init__(ParameterSpace([
            ParameterSpec.vector('log_alpha', t.n_dev_lags - 1),
            ParameterSpec('gamma1'),
            ParameterSpec('gamma2'),
        ]))
        self.triangle = t
        self.cfg = cfg
        self.cells = development_cells(t, 2, cfg.tau, cfg.loss_scale)

    def log_density_constrained(self, values: Values) -> Tuple[float, Values]:
        return _combine(ChainLadderParams.from_values(values), self.cells, self.cfg)

    def log_likelihood(self, values: Values) -> float:
        ll, _ = cl_log_likelihood(ChainLadderParams.from_values(values), self.cells, self.cfg.sigma_scale)
        return ll

    def sample_prior(self, rng: np.random.Generator) -> Values:
        return sample_cl_prior(self.cfg, self.triangle.n_dev_lags, rng).to_values()

    def generated_quantities(self, values: Values) -> Values:
        return {'alpha': np.exp(np.asarray(values['log_alpha'], dtype=float))}

    def prior_summary(self) -> Dict[str, Tuple[float, float]]:
        return {name: (loc, scale * self.cfg.prior_scale) for name, (loc, scale) in PRIORS.items()}
