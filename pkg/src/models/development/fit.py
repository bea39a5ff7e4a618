"""
Development Fitting
Fits the chain-ladder body and Bondy tail of one triangle and simulates its
ultimates.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from src.data.triangle import Triangle
from src.inference.diagnostics import max_rhat
from src.inference.draws import DrawMatrix
from src.inference.sampler import SamplerConfig, sample
from src.models.development.bondy import BondyModel
from src.models.development.chain_ladder import ChainLadderModel
from src.models.development.config import DevConfig
from src.models.development.simulation import UltimateSummary, simulate_development

logger = logging.getLogger(__name__)


def resolve_loss_scale(t: Triangle, setting: Union[float, str]) -> float:
    """Numeric loss scale; ``'auto'`` uses the mean first-lag loss."""
    if setting == 'auto':
        return float(np.mean(t.losses[:, 0]))
    return float(setting)


@dataclass
class DevelopmentFit:
    """Posterior draws of both development models for one triangle."""
    triangle_id: str
    cfg: DevConfig
    body: DrawMatrix
    tail: DrawMatrix

    @property
    def max_rhat(self) -> float:
        return max(max_rhat(self.body), max_rhat(self.tail))

    @property
    def divergences(self) -> int:
        return self.body.metadata.total_divergences + self.tail.metadata.total_divergences

    @property
    def divergence_fraction(self) -> float:
        return self.divergences / float(self.body.n_draws + self.tail.n_draws)

    def convergence_row(self) -> dict:
        return {
            'triangle_id': self.triangle_id,
            'max_rhat': self.max_rhat,
            'divergences': self.divergences,
            'divergence_fraction': self.divergence_fraction,
            'body_step_size': float(np.mean(self.body.metadata.step_sizes or [np.nan])),
            'tail_step_size': float(np.mean(self.tail.metadata.step_sizes or [np.nan])),
        }


def fit_development(t: Triangle, cfg: DevConfig, sampler_cfg: Optional[SamplerConfig] = None) -> DevelopmentFit:
    """
    Fit both development models to a training triangle.

    Args:
        t: Run-off (or otherwise partially observed) triangle
        cfg: Development settings
        sampler_cfg: HMC settings; the tail fit uses seed + 1

    Returns:
        DevelopmentFit with body and tail draws
    """
    sampler_cfg = sampler_cfg or SamplerConfig()
    logger.info(f"{t.triangle_id}: fitting chain-ladder (tau={cfg.tau}) and Bondy (rho={cfg.rho})")
    body = sample(ChainLadderModel(t, cfg), sampler_cfg)
    tail = sample(BondyModel(t, cfg), replace(sampler_cfg, seed=sampler_cfg.seed + 1))
    return DevelopmentFit(triangle_id=t.triangle_id, cfg=cfg, body=body, tail=tail)


def develop_triangle(
    t: Triangle,
    cfg: DevConfig,
    sampler_cfg: Optional[SamplerConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple:
    """Fit and simulate ultimates; returns (DevelopmentFit, UltimateSummary)."""
    sampler_cfg = sampler_cfg or SamplerConfig()
    fit = fit_development(t, cfg, sampler_cfg)
    rng = rng or np.random.default_rng(sampler_cfg.seed)
    summary: UltimateSummary = simulate_development(fit.body, fit.tail, t, cfg, rng)
    return fit, summary
