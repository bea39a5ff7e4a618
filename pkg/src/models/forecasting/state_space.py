"""
State-Space Loss Ratio Models
Random-walk and mean-reversion dynamics on the latent log ultimate loss ratio,
coupled to development outputs through a lognormal measurement error model.
"""

import logging
import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from src.inference.model import LogDensityModel, Values
from src.inference.parameters import Constraint, ParameterSpace, ParameterSpec
from src.models.densities import lognormal_terms, normal_prior, normal_terms
from src.models.forecasting.measurement import MeasurementErrorInput, measurement_terms
from src.utils.errors import DataValidationError, ModelEvaluationError

logger = logging.getLogger(__name__)


class ModelKind(Enum):
    """Latent dynamics of the forecasting model."""
    RANDOM_WALK = "rw"
    MEAN_REVERSION = "mr"


@dataclass(frozen=True)
class ForecastPriors:
    """(location, scale) for every non-latent forecasting parameter."""
    log_eps: Tuple[float, float] = (-0.5, 1.0)
    eta0: Tuple[float, float] = (0.0, 1.0)
    fc_gamma: Tuple[float, float] = (-2.0, 1.0)
    mu: Tuple[float, float] = (-1.0, 1.0)
    logit_phi: Tuple[float, float] = (0.0, 1.0)

    def scaled(self, factor: float) -> 'ForecastPriors':
        """Multiply every prior scale by ``factor``."""
        return replace(self, **{
            f.name: (getattr(self, f.name)[0], getattr(self, f.name)[1] * factor)
            for f in fields(self)
        })

    def as_dict(self) -> Dict[str, Tuple[float, float]]:
        return {f.name: tuple(getattr(self, f.name)) for f in fields(self)}


@dataclass
class RandomWalkParams:
    eta: np.ndarray
    eta0: float
    log_eps: float
    fc_gamma: np.ndarray
    r_true: Optional[np.ndarray] = None

    @property
    def eps(self) -> float:
        return math.exp(self.log_eps)


@dataclass
class MeanReversionParams(RandomWalkParams):
    mu: float = -1.0
    logit_phi: float = 0.0

    @property
    def phi(self) -> float:
        return float(expit(self.logit_phi))


def observation_variance(fc_gamma: np.ndarray, premiums: np.ndarray) -> np.ndarray:
    """sigma_i^2 = exp(gamma1)^2 + exp(gamma2)^2 / sqrt(p_i)."""
    return np.exp(2.0 * fc_gamma[0]) + np.exp(2.0 * fc_gamma[1]) / np.sqrt(premiums)


def transition_means(eta: np.ndarray, eta0: float, mu: float, phi: float) -> np.ndarray:
    """Conditional mean of each eta_i given its predecessor."""
    prev = np.concatenate([[eta0], eta[:-1]])
    return mu * (1.0 - phi) + phi * prev


def program_log_likelihood(
    eta: np.ndarray,
    eta0: float,
    log_eps: float,
    fc_gamma: np.ndarray,
    r_true: Optional[np.ndarray],
    me: MeasurementErrorInput,
    premiums: np.ndarray,
    mu: float = 0.0,
    logit_phi: Optional[float] = None,
) -> Tuple[float, Dict[str, object]]:
    """
    Transition, observation and measurement terms for one program.

    ``logit_phi=None`` selects the random walk (phi = 1). Without ``r_true``
    the observed means are used directly as the observed ratios.

    Returns:
        (log density, gradient keyed by eta, eta0, log_eps, fc_gamma,
        r_true, mu, logit_phi)
    """
    n = eta.size
    if premiums.shape != (n,) or me.n != n:
        raise DataValidationError(
            "Latent states, premiums and observations differ in length",
            {'eta': n, 'premiums': premiums.size, 'observations': me.n},
        )
    if np.any(~(premiums > 0)):
        raise DataValidationError("Premiums must be strictly positive")

    phi = 1.0 if logit_phi is None else float(expit(logit_phi))
    eps2 = math.exp(2.0 * log_eps)

    # latent transitions
    means = transition_means(eta, eta0, mu, phi)
    lp_tr, d_eta, d_mean, d_var = normal_terms(eta, means, np.full(n, eps2))
    grad_eta = d_eta.copy()
    grad_eta[:-1] += d_mean[1:] * phi
    grad_eta0 = float(d_mean[0] * phi)
    grad_log_eps = float(d_var.sum() * 2.0 * eps2)
    prev = np.concatenate([[eta0], eta[:-1]])
    grad_mu = float(d_mean.sum() * (1.0 - phi))
    grad_logit_phi = float((d_mean * (prev - mu)).sum() * phi * (1.0 - phi))

    # observation of the (latent) ultimate ratio
    var_obs = observation_variance(fc_gamma, premiums)
    target = r_true if r_true is not None else me.mean
    log_target = np.log(target)
    lp_obs, d_mu_obs, d_logv_obs = lognormal_terms(log_target, eta, np.log(var_obs))
    grad_eta += d_mu_obs
    grad_fc = np.array([
        float((d_logv_obs * 2.0 * np.exp(2.0 * fc_gamma[0]) / var_obs).sum()),
        float((d_logv_obs * 2.0 * np.exp(2.0 * fc_gamma[1]) / np.sqrt(premiums) / var_obs).sum()),
    ])
    total = float(lp_tr.sum() + lp_obs.sum())

    grad: Dict[str, object] = {
        'eta': grad_eta, 'eta0': grad_eta0, 'log_eps': grad_log_eps, 'fc_gamma': grad_fc,
        'mu': grad_mu, 'logit_phi': grad_logit_phi,
    }
    if r_true is not None:
        lp_me, grad_r = measurement_terms(r_true, me)
        total += lp_me
        grad['r_true'] = grad_r + (-1.0 - d_mu_obs) / r_true

    if not np.isfinite(total):
        raise ModelEvaluationError("Non-finite state-space density")
    return total, grad


def _prior_terms(names, values: Values, priors: ForecastPriors) -> Tuple[float, Values]:
    lp, grad = 0.0, {}
    for name in names:
        loc, scale = getattr(priors, name)
        term, g = normal_prior(values[name], loc, scale)
        lp += term
        grad[name] = g
    return lp, grad


def _assemble(kind: ModelKind, p: RandomWalkParams, me: MeasurementErrorInput,
              premiums: np.ndarray, priors: ForecastPriors) -> Tuple[float, Values]:
    is_mr = kind is ModelKind.MEAN_REVERSION
    ll, grad = program_log_likelihood(
        np.asarray(p.eta, dtype=float), p.eta0, p.log_eps, np.asarray(p.fc_gamma, dtype=float),
        p.r_true, me, np.asarray(premiums, dtype=float),
        mu=p.mu if is_mr else 0.0, logit_phi=p.logit_phi if is_mr else None,
    )
    names = ['log_eps', 'eta0', 'fc_gamma'] + (['mu', 'logit_phi'] if is_mr else [])
    values = {'log_eps': p.log_eps, 'eta0': p.eta0, 'fc_gamma': p.fc_gamma}
    if is_mr:
        values.update(mu=p.mu, logit_phi=p.logit_phi)
    lp, g_prior = _prior_terms(names, values, priors)
    for name in names:
        grad[name] = grad[name] + g_prior[name]
    if not is_mr:
        grad.pop('mu')
        grad.pop('logit_phi')
    if p.r_true is None:
        grad.pop('r_true', None)
    return ll + lp, grad


def rw_log_density(p: RandomWalkParams, me: MeasurementErrorInput, premiums: np.ndarray,
                   prior_scale: float = 1.0,
                   priors: Optional[ForecastPriors] = None) -> Tuple[float, Values]:
    """
    Posterior log density of the random-walk forecaster.

    Args:
        p: Parameters; ``r_true`` set enables the measurement error model
        me: Observed ultimate summaries
        premiums: Earned premium per accident year
        prior_scale: Multiplier on the default prior scales
        priors: Explicit priors (used as given, without ``prior_scale``)
    """
    priors = priors or ForecastPriors().scaled(prior_scale)
    return _assemble(ModelKind.RANDOM_WALK, p, me, premiums, priors)


def mr_log_density(p: MeanReversionParams, me: MeasurementErrorInput, premiums: np.ndarray,
                   prior_scale: float = 1.0,
                   priors: Optional[ForecastPriors] = None) -> Tuple[float, Values]:
    """Posterior log density of the mean-reversion forecaster."""
    priors = priors or ForecastPriors().scaled(prior_scale)
    return _assemble(ModelKind.MEAN_REVERSION, p, me, premiums, priors)


def state_space_specs(kind: ModelKind, n: int, measurement_error: bool, suffix: str = ''):
    """Parameter blocks of one program, optionally suffixed for hierarchical layouts."""
    specs = [ParameterSpec.vector(f'eta{suffix}', n), ParameterSpec.vector(f'fc_gamma{suffix}', 2)]
    if measurement_error:
        specs.append(ParameterSpec.vector(f'r_true{suffix}', n, Constraint.POSITIVE))
    if kind is ModelKind.MEAN_REVERSION:
        specs += [ParameterSpec(f'mu{suffix}'), ParameterSpec(f'logit_phi{suffix}')]
    return specs


def sample_latent_start(
    kind: ModelKind, me: MeasurementErrorInput, priors: ForecastPriors, rng: np.random.Generator,
    measurement_error: bool,
) -> Values:
    """Initial values near the data: eta at log observed ratios, priors for the rest."""
    log_m = np.log(me.mean)
    values: Values = {
        'eta': log_m + rng.normal(0.0, 0.1, size=me.n),
        'fc_gamma': rng.normal(priors.fc_gamma[0], 0.5, size=2),
    }
    if measurement_error:
        values['r_true'] = me.mean * np.exp(rng.normal(0.0, 0.05, size=me.n))
    if kind is ModelKind.MEAN_REVERSION:
        values['mu'] = float(log_m.mean() + rng.normal(0.0, 0.1))
        values['logit_phi'] = float(rng.normal(priors.logit_phi[0], 0.5))
    return values


class StateSpaceModel(LogDensityModel):
    """
    Single-program forecaster over accident years 1..N.

    Args:
        kind: Random walk or mean reversion
        me: Observed ultimate summaries
        premiums: Earned premiums for the same accident years
        priors: Prior settings (already scaled)
        measurement_error: Sample latent ratios r' (otherwise observe m directly)
    """

    def __init__(self, kind: ModelKind, me: MeasurementErrorInput, premiums: np.ndarray,
                 priors: Optional[ForecastPriors] = None, measurement_error: bool = True):
        self.kind = kind
        self.name = kind.value
        self.me = me
        self.premiums = np.asarray(premiums, dtype=float)
        self.priors = priors or ForecastPriors()
        self.measurement_error = measurement_error
        specs = state_space_specs(kind, me.n, measurement_error)
        specs[1:1] = [ParameterSpec('eta0'), ParameterSpec('log_eps')]
        super().__init__(ParameterSpace(specs))

    def _params(self, values: Values) -> RandomWalkParams:
        common = dict(
            eta=np.asarray(values['eta'], dtype=float),
            eta0=float(values['eta0']),
            log_eps=float(values['log_eps']),
            fc_gamma=np.asarray(values['fc_gamma'], dtype=float),
            r_true=np.asarray(values['r_true'], dtype=float) if self.measurement_error else None,
        )
        if self.kind is ModelKind.MEAN_REVERSION:
            return MeanReversionParams(**common, mu=float(values['mu']),
                                       logit_phi=float(values['logit_phi']))
        return RandomWalkParams(**common)

    def log_density_constrained(self, values: Values) -> Tuple[float, Values]:
        return _assemble(self.kind, self._params(values), self.me, self.premiums, self.priors)

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        values = sample_latent_start(self.kind, self.me, self.priors, rng, self.measurement_error)
        values['eta0'] = float(np.log(self.me.mean[0]) + rng.normal(0.0, 0.1))
        values['log_eps'] = float(rng.normal(self.priors.log_eps[0], 0.5))
        return self.space.unconstrain(values)

    def generated_quantities(self, values: Values) -> Values:
        out: Values = {'eps': math.exp(float(values['log_eps']))}
        if self.kind is ModelKind.MEAN_REVERSION:
            out['phi'] = float(expit(float(values['logit_phi'])))
        return out

    def prior_summary(self) -> Dict[str, Tuple[float, float]]:
        summary = self.priors.as_dict()
        if self.kind is ModelKind.RANDOM_WALK:
            summary.pop('mu')
            summary.pop('logit_phi')
        return summary
