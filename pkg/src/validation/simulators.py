"""
Data Simulators
Forward simulation of complete triangles from development parameters, prior
draws of the forecasting models, and a random-walk corpus for self-generation
backtests.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from src.data.triangle import Triangle
from src.models.development.bondy import BondyParams
from src.models.development.chain_ladder import ChainLadderParams
from src.models.development.config import DevConfig
from src.models.development.simulation import DevelopmentDraws, simulate_paths
from src.models.forecasting.measurement import lognormal_moment_match
from src.models.forecasting.state_space import (
    ForecastPriors,
    MeanReversionParams,
    ModelKind,
    RandomWalkParams,
    observation_variance,
)

logger = logging.getLogger(__name__)


def simulate_seeds(n: int, rng: np.random.Generator, log_mean: float = 0.0, log_sd: float = 0.5) -> np.ndarray:
    """First-lag losses exp(Normal(log_mean, log_sd))."""
    return np.exp(rng.normal(log_mean, log_sd, size=n))


def simulate_triangle(
    cl: ChainLadderParams,
    bondy: BondyParams,
    seeds: Sequence[float],
    cfg: DevConfig,
    rng: np.random.Generator,
    n_dev_lags: Optional[int] = None,
    triangle_id: str = 'sim',
    line: str = 'SIM',
    premiums: Optional[Sequence[float]] = None,
) -> Triangle:
    """
    Simulate a complete N x M square from fixed development parameters.

    Lags 2..tau follow the chain-ladder draw and later lags the Bondy draw.
    Premiums default to ones, so losses double as loss ratios.
    """
    seeds = np.asarray(seeds, dtype=float)
    m = n_dev_lags or seeds.size
    params = DevelopmentDraws.from_params(cl, bondy)
    paths, _ = simulate_paths(params, seeds, replace(cfg, j_max=m, loss_scale=1.0), m, rng)
    return Triangle(
        triangle_id=triangle_id,
        line=line,
        losses=paths[0],
        premiums=np.ones(seeds.size) if premiums is None else np.asarray(premiums, dtype=float),
    )


@dataclass
class ForecastTruth:
    """Generating values of one simulated forecasting dataset."""
    params: RandomWalkParams
    r_true: np.ndarray
    observed_mean: np.ndarray
    observed_sd: np.ndarray
    premiums: np.ndarray


def sample_forecast_prior(
    kind: ModelKind,
    priors: ForecastPriors,
    n: int,
    rng: np.random.Generator,
) -> RandomWalkParams:
    """Parameters and latent path of a forecaster drawn from its priors."""
    log_eps = float(rng.normal(*priors.log_eps))
    eta0 = float(rng.normal(*priors.eta0))
    fc_gamma = rng.normal(priors.fc_gamma[0], priors.fc_gamma[1], size=2)
    if kind is ModelKind.MEAN_REVERSION:
        mu = float(rng.normal(*priors.mu))
        logit_phi = float(rng.normal(*priors.logit_phi))
        phi = 1.0 / (1.0 + math.exp(-logit_phi))
    else:
        mu, logit_phi, phi = 0.0, None, 1.0

    eta = np.empty(n)
    prev = eta0
    for i in range(n):
        prev = mu * (1.0 - phi) + phi * prev + math.exp(log_eps) * rng.standard_normal()
        eta[i] = prev

    if kind is ModelKind.MEAN_REVERSION:
        return MeanReversionParams(eta=eta, eta0=eta0, log_eps=log_eps, fc_gamma=fc_gamma,
                                   mu=mu, logit_phi=logit_phi)
    return RandomWalkParams(eta=eta, eta0=eta0, log_eps=log_eps, fc_gamma=fc_gamma)


def simulate_forecast_data(
    kind: ModelKind,
    priors: ForecastPriors,
    premiums: Sequence[float],
    rng: np.random.Generator,
    measurement_cv: float = 0.05,
) -> ForecastTruth:
    """
    Draw a forecasting dataset from the prior predictive.

    Latent ratios r' ~ Lognormal(eta_i, sigma_i); observed means
    m_i ~ Lognormal(moment_match(r'_i, s_i)) with s_i = measurement_cv * r'_i.
    """
    premiums = np.asarray(premiums, dtype=float)
    params = sample_forecast_prior(kind, priors, premiums.size, rng)
    sigma = np.sqrt(observation_variance(params.fc_gamma, premiums))
    r_true = np.exp(params.eta + sigma * rng.standard_normal(premiums.size))
    sd = measurement_cv * r_true
    mu_xi, sigma_xi = lognormal_moment_match(r_true, sd)
    observed = np.exp(mu_xi + sigma_xi * rng.standard_normal(premiums.size))
    params.r_true = r_true
    return ForecastTruth(params=params, r_true=r_true, observed_mean=observed,
                         observed_sd=sd, premiums=premiums)


def _development_pattern(m: int) -> np.ndarray:
    """Age-to-age factors into lags 2..M decaying geometrically towards one."""
    j = np.arange(2, m + 1)
    return np.exp(1.2 * 0.55 ** (j - 2))


def simulate_random_walk_corpus(
    n_programs: int,
    n_years: int,
    rng: np.random.Generator,
    line: str = 'PP',
    eps_mu: float = -1.6,
    eps_sigma: float = 0.2,
    eta_mu0: float = math.log(0.65),
    eta_sigma0: float = 0.15,
    fc_gamma: Sequence[float] = (-3.5, -3.0),
    premium_level: float = 10000.0,
    development_noise: float = 0.02,
) -> List[Triangle]:
    """
    Full-square triangles whose ultimate loss ratios follow a random walk.

    Program g draws log eps_g ~ Normal(eps_mu, eps_sigma) and
    eta0_g ~ Normal(eta_mu0, eta_sigma0); ultimates are lognormal around
    exp(eta_i) and developed backwards through a shared pattern with small
    lognormal noise, so the last column holds the ultimate exactly.
    """
    gamma = np.asarray(fc_gamma, dtype=float)
    pattern = _development_pattern(n_years)
    triangles = []
    for g in range(1, n_programs + 1):
        eps = math.exp(rng.normal(eps_mu, eps_sigma))
        eta = rng.normal(eta_mu0, eta_sigma0) + np.cumsum(eps * rng.standard_normal(n_years))
        premiums = premium_level * np.exp(rng.normal(0.0, 0.2, size=n_years))
        sigma = np.sqrt(observation_variance(gamma, premiums))
        ultimate = np.exp(eta + sigma * rng.standard_normal(n_years)) * premiums

        losses = np.empty((n_years, n_years))
        losses[:, -1] = ultimate
        for j in range(n_years - 1, 0, -1):
            noise = np.exp(development_noise * 0.8 ** j * rng.standard_normal(n_years))
            losses[:, j - 1] = losses[:, j] / (pattern[j - 1] * noise)
        triangles.append(Triangle(
            triangle_id=f"{line}-{g:03d}",
            line=line,
            losses=losses,
            premiums=premiums,
            accident_years=tuple(range(1, n_years + 1)),
        ))
    logger.debug(f"Simulated {n_programs} random-walk programs for line {line}")
    return triangles
