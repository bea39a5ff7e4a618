"""
Generalized Bondy Tail Model
Link ratios omega ** (beta ** j) decaying geometrically to one, fitted on a
window of late development lags.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy.special import expit

from src.data.triangle import Triangle
from src.inference.model import LogDensityModel, Values
from src.inference.parameters import Constraint, ParameterSpace, ParameterSpec
from src.models.densities import half_normal_prior, lognormal_terms, normal_prior
from src.models.development.config import DevConfig, DevelopmentCells, development_cells
from src.utils.errors import ModelEvaluationError

logger = logging.getLogger(__name__)

# log_omega is half-normal at zero; the rest are normal
PRIORS = {
    'log_omega': (0.0, 1.0),
    'logit_beta': (-2.0, 0.5),
    'lambda1': (-3.0, 0.25),
    'lambda2': (-1.0, 0.1),
}


@dataclass
class BondyParams:
    log_omega: float
    logit_beta: float
    lambda1: float
    lambda2: float

    @property
    def omega(self) -> float:
        return math.exp(self.log_omega)

    @property
    def beta(self) -> float:
        return float(expit(self.logit_beta))

    def log_factor(self, j: np.ndarray) -> np.ndarray:
        """log alpha_j = log(omega) * beta ** j."""
        return self.log_omega * self.beta ** np.asarray(j, dtype=float)

    @classmethod
    def from_values(cls, values: Values) -> 'BondyParams':
        return cls(**{name: float(values[name]) for name in PRIORS})

    def to_values(self) -> Values:
        return {name: float(getattr(self, name)) for name in PRIORS}


def bondy_log_likelihood(
    p: BondyParams, cells: DevelopmentCells, sigma_scale: float = 1.0
) -> Tuple[float, Values]:
    j = cells.j.astype(float)
    beta = p.beta
    beta_j = beta ** j
    mu = p.log_omega * beta_j + cells.log_y_prev
    log_var = p.lambda1 + p.lambda2 * j + cells.log_y_prev + 2.0 * math.log(sigma_scale)
    lp, d_mu, d_log_var = lognormal_terms(cells.log_y, mu, log_var)
    grad = {
        'log_omega': float((d_mu * beta_j).sum()),
        'logit_beta': float((d_mu * p.log_omega * j * beta_j * (1.0 - beta)).sum()),
        'lambda1': float(d_log_var.sum()),
        'lambda2': float((d_log_var * j).sum()),
    }
    return float(lp.sum()), grad


def bondy_log_prior(p: BondyParams, prior_scale: float = 1.0) -> Tuple[float, Values]:
    lp, grad = half_normal_prior(p.log_omega, PRIORS['log_omega'][1] * prior_scale)
    out = {'log_omega': grad}
    for name in ('logit_beta', 'lambda1', 'lambda2'):
        loc, scale = PRIORS[name]
        term, g = normal_prior(getattr(p, name), loc, scale * prior_scale)
        lp += term
        out[name] = g
    return lp, out


def bondy_log_density(p: BondyParams, t: Triangle, cfg: DevConfig) -> Tuple[float, Values]:
    """Posterior log density of the tail model over lags max(2, rho1)..rho2."""
    lo, hi = cfg.tail_window
    return _combine(p, development_cells(t, lo, hi, cfg.loss_scale), cfg)


def _combine(p: BondyParams, cells: DevelopmentCells, cfg: DevConfig) -> Tuple[float, Values]:
    ll, g_ll = bondy_log_likelihood(p, cells, cfg.sigma_scale)
    lp, g_lp = bondy_log_prior(p, cfg.prior_scale)
    total = ll + lp
    if not np.isfinite(total):
        raise ModelEvaluationError("Non-finite Bondy density", {'log_likelihood': ll})
    return total, {name: g_ll[name] + g_lp[name] for name in g_ll}


def sample_bondy_prior(cfg: DevConfig, rng: np.random.Generator) -> BondyParams:
    k = cfg.prior_scale
    return BondyParams(
        log_omega=float(abs(rng.normal(0.0, PRIORS['log_omega'][1] * k))),
        logit_beta=float(rng.normal(PRIORS['logit_beta'][0], PRIORS['logit_beta'][1] * k)),
        lambda1=float(rng.normal(PRIORS['lambda1'][0], PRIORS['lambda1'][1] * k)),
        lambda2=float(rng.normal(PRIORS['lambda2'][0], PRIORS['lambda2'][1] * k)),
    )


class BondyModel(LogDensityModel):
    """Generalized Bondy tail fitted on the configured window of one triangle."""

    name = "bondy"

    def __init__(self, t: Triangle, cfg: DevConfig):
        cfg.validate_for(t.n_dev_lags)
        super().__init__(ParameterSpace([
            ParameterSpec('log_omega', constraint=Constraint.POSITIVE),
            ParameterSpec('logit_beta'),
            ParameterSpec('lambda1'),
            ParameterSpec('lambda2'),
        ]))
        self.triangle = t
        self.cfg = cfg
        lo, hi = cfg.tail_window
        self.cells = development_cells(t, lo, hi, cfg.loss_scale)

    def log_density_constrained(self, values: Values) -> Tuple[float, Values]:
        return _combine(BondyParams.from_values(values), self.cells, self.cfg)

    def log_likelihood(self, values: Values) -> float:
        ll, _ = bondy_log_likelihood(BondyParams.from_values(values), self.cells, self.cfg.sigma_scale)
        return ll

    def sample_prior(self, rng: np.random.Generator) -> Values:
        values = sample_bondy_prior(self.cfg, rng).to_values()
        # keep the starting point off the boundary of the half-normal
        values['log_omega'] = max(values['log_omega'], 1e-3)
        return values

    def generated_quantities(self, values: Values) -> Values:
        return {
            'omega': math.exp(float(values['log_omega'])),
            'beta': float(expit(float(values['logit_beta']))),
        }

    def prior_summary(self) -> Dict[str, Tuple[float, float]]:
        return {name: (loc, scale * self.cfg.prior_scale) for name, (loc, scale) in PRIORS.items()}
