"""
Hierarchical State-Space Model
Partial pooling of the innovation scale and the initial latent level across
the programs of one line, in a non-centered parameterization.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from src.inference.draws import DrawMatrix
from src.inference.model import LogDensityModel, Values
from src.inference.parameters import ParameterSpace, ParameterSpec
from src.inference.sampler import SamplerConfig, sample
from src.models.densities import normal_prior
from src.models.forecasting.measurement import MeasurementErrorInput
from src.models.forecasting.state_space import (
    ForecastPriors,
    ModelKind,
    program_log_likelihood,
    sample_latent_start,
    state_space_specs,
)
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_HYPERPRIORS: Dict[str, Tuple[float, float]] = {
    'eps_mu': (-2.0, 0.5),
    'log_eps_sigma': (-2.0, 0.5),
    'eta_mu0': (-1.0, 0.5),
    'log_eta_sigma0': (-2.0, 0.5),
}

PROGRAM_BLOCKS = ('eta', 'fc_gamma', 'r_true', 'mu', 'logit_phi')


@dataclass
class ProgramData:
    """Forecasting inputs of one program."""
    triangle_id: str
    me: MeasurementErrorInput
    premiums: np.ndarray

    def __post_init__(self):
        self.premiums = np.asarray(self.premiums, dtype=float)


@dataclass
class HierarchicalConfig:
    """
    Pooling settings for one line of business.

    ``prior_scale`` multiplies the hyperprior scales and the scales of the
    unpooled per-program priors.
    """
    group: str = ''
    prior_scale: float = 1.0
    hyperpriors: Dict[str, Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_HYPERPRIORS)
    )
    priors: ForecastPriors = field(default_factory=ForecastPriors)
    measurement_error: bool = True

    def scaled_hyperpriors(self) -> Dict[str, Tuple[float, float]]:
        return {name: (loc, scale * self.prior_scale) for name, (loc, scale) in self.hyperpriors.items()}


def _suffix(g: int) -> str:
    return f'_g{g}'


class HierarchicalModel(LogDensityModel):
    """
    Joint model over G programs sharing hyperparameters.

    Program g (1-based) owns ``eps_z_g{g}`` and ``eta0_z_g{g}`` with
    log eps_g = eps_mu + eps_sigma * eps_z and
    eta0_g = eta_mu0 + eta_sigma0 * eta0_z, plus its own latent states,
    observation noise and (for mean reversion) mu and logit_phi.
    """

    def __init__(self, programs: Sequence[ProgramData], kind: ModelKind,
                 cfg: Optional[HierarchicalConfig] = None):
        if not programs:
            raise ConfigError("Hierarchical model needs at least one program")
        self.programs = list(programs)
        self.kind = kind
        self.cfg = cfg or HierarchicalConfig()
        self.name = f"hierarchical_{kind.value}"
        self.hyperpriors = self.cfg.scaled_hyperpriors()
        self.priors = self.cfg.priors.scaled(self.cfg.prior_scale)

        specs = [ParameterSpec(name) for name in DEFAULT_HYPERPRIORS]
        for g, program in enumerate(self.programs, start=1):
            sfx = _suffix(g)
            specs += [ParameterSpec(f'eps_z{sfx}'), ParameterSpec(f'eta0_z{sfx}')]
            specs += state_space_specs(kind, program.me.n, self.cfg.measurement_error, sfx)
        super().__init__(ParameterSpace(specs))

    @property
    def n_programs(self) -> int:
        return len(self.programs)

    def log_density_constrained(self, values: Values) -> Tuple[float, Values]:
        lp, grad = 0.0, {}
        for name, (loc, scale) in self.hyperpriors.items():
            term, g = normal_prior(values[name], loc, scale)
            lp += term
            grad[name] = g

        eps_mu, eta_mu0 = float(values['eps_mu']), float(values['eta_mu0'])
        eps_sigma = math.exp(float(values['log_eps_sigma']))
        eta_sigma0 = math.exp(float(values['log_eta_sigma0']))
        is_mr = self.kind is ModelKind.MEAN_REVERSION

        for g, program in enumerate(self.programs, start=1):
            sfx = _suffix(g)
            z_eps, z_eta0 = float(values[f'eps_z{sfx}']), float(values[f'eta0_z{sfx}'])
            log_eps = eps_mu + eps_sigma * z_eps
            eta0 = eta_mu0 + eta_sigma0 * z_eta0
            ll, g_ll = program_log_likelihood(
                np.asarray(values[f'eta{sfx}'], dtype=float), eta0, log_eps,
                np.asarray(values[f'fc_gamma{sfx}'], dtype=float),
                np.asarray(values[f'r_true{sfx}'], dtype=float) if self.cfg.measurement_error else None,
                program.me, program.premiums,
                mu=float(values[f'mu{sfx}']) if is_mr else 0.0,
                logit_phi=float(values[f'logit_phi{sfx}']) if is_mr else None,
            )
            lp += ll

            # standard-normal auxiliaries
            lp += -0.5 * (z_eps ** 2 + z_eta0 ** 2) - math.log(2.0 * math.pi)
            grad[f'eps_z{sfx}'] = g_ll['log_eps'] * eps_sigma - z_eps
            grad[f'eta0_z{sfx}'] = g_ll['eta0'] * eta_sigma0 - z_eta0
            grad['eps_mu'] += g_ll['log_eps']
            grad['log_eps_sigma'] += g_ll['log_eps'] * eps_sigma * z_eps
            grad['eta_mu0'] += g_ll['eta0']
            grad['log_eta_sigma0'] += g_ll['eta0'] * eta_sigma0 * z_eta0

            unpooled = ['fc_gamma'] + (['mu', 'logit_phi'] if is_mr else [])
            for name in unpooled:
                loc, scale = getattr(self.priors, name)
                term, g_prior = normal_prior(values[f'{name}{sfx}'], loc, scale)
                lp += term
                grad[f'{name}{sfx}'] = g_ll[name] + g_prior
            grad[f'eta{sfx}'] = g_ll['eta']
            if self.cfg.measurement_error:
                grad[f'r_true{sfx}'] = g_ll['r_true']
        return lp, grad

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        values: Values = {
            name: float(rng.normal(loc, 0.5 * scale)) for name, (loc, scale) in self.hyperpriors.items()
        }
        for g, program in enumerate(self.programs, start=1):
            sfx = _suffix(g)
            values[f'eps_z{sfx}'] = float(rng.normal(0.0, 0.5))
            values[f'eta0_z{sfx}'] = float(rng.normal(0.0, 0.5))
            start = sample_latent_start(self.kind, program.me, self.priors, rng, self.cfg.measurement_error)
            values.update({f'{name}{sfx}': value for name, value in start.items()})
        return self.space.unconstrain(values)

    def generated_quantities(self, values: Values) -> Values:
        eps_sigma = math.exp(float(values['log_eps_sigma']))
        eta_sigma0 = math.exp(float(values['log_eta_sigma0']))
        out: Values = {'eps_sigma': eps_sigma, 'eta_sigma0': eta_sigma0}
        for g in range(1, self.n_programs + 1):
            sfx = _suffix(g)
            log_eps = float(values['eps_mu']) + eps_sigma * float(values[f'eps_z{sfx}'])
            out[f'log_eps{sfx}'] = log_eps
            out[f'eps{sfx}'] = math.exp(log_eps)
            out[f'eta0{sfx}'] = float(values['eta_mu0']) + eta_sigma0 * float(values[f'eta0_z{sfx}'])
            if self.kind is ModelKind.MEAN_REVERSION:
                out[f'phi{sfx}'] = float(expit(float(values[f'logit_phi{sfx}'])))
        return out

    def prior_summary(self) -> Dict[str, Tuple[float, float]]:
        summary = dict(self.hyperpriors)
        summary['fc_gamma'] = self.priors.fc_gamma
        if self.kind is ModelKind.MEAN_REVERSION:
            summary['mu'] = self.priors.mu
            summary['logit_phi'] = self.priors.logit_phi
        return summary


def program_draws(hier: DrawMatrix, g: int) -> DrawMatrix:
    """
    Single-program view of a hierarchical fit.

    Args:
        hier: Draws from a HierarchicalModel
        g: 1-based program index

    Returns:
        DrawMatrix with the unsuffixed names a single-program fit produces
    """
    sfx = _suffix(g)
    if f'eta{sfx}' not in hier:
        raise KeyError(f"Program {g} is not part of these draws")
    draws = {name: hier.get(f'{name}{sfx}') for name in PROGRAM_BLOCKS if f'{name}{sfx}' in hier}
    draws['log_eps'] = hier.get(f'log_eps{sfx}')
    draws['eta0'] = hier.get(f'eta0{sfx}')
    draws['eps'] = hier.get(f'eps{sfx}')
    if f'phi{sfx}' in hier:
        draws['phi'] = hier.get(f'phi{sfx}')
    return DrawMatrix(draws=draws, metadata=hier.metadata)


def fit_hierarchical(programs: Sequence[ProgramData], kind: ModelKind,
                     cfg: Optional[HierarchicalConfig] = None,
                     sampler_cfg: Optional[SamplerConfig] = None) -> DrawMatrix:
    """
    Fit the hierarchical forecaster jointly over the programs of a line.

    Args:
        programs: Per-program forecasting inputs (G >= 1)
        kind: Random walk or mean reversion
        cfg: Pooling and prior settings
        sampler_cfg: HMC settings

    Returns:
        DrawMatrix over hyperparameters and suffixed per-program blocks
    """
    cfg = cfg or HierarchicalConfig()
    if len(programs) == 1:
        logger.warning(f"{cfg.group or 'group'}: a single program only shrinks toward the hyperpriors")
    model = HierarchicalModel(programs, kind, cfg)
    logger.info(f"Fitting {model.name} over {model.n_programs} programs ({cfg.group or 'ungrouped'})")
    draws = sample(model, sampler_cfg)
    draws.metadata.extra['programs'] = [p.triangle_id for p in programs]
    return draws
