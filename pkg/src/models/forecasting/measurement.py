"""
Measurement Error Coupling
Treats development-model ultimate summaries as noisy lognormal observations
of a latent true loss ratio.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from src.models.densities import lognormal_terms
from src.utils.errors import DataValidationError

logger = logging.getLogger(__name__)

SD_FLOOR = 1e-8

ArrayLike = Union[float, np.ndarray]


def lognormal_moment_match(mean: ArrayLike, sd: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    """
    Lognormal (mu_log, sigma_log) with the given mean and standard deviation.

    Args:
        mean: Positive mean(s)
        sd: Non-negative standard deviation(s)

    Returns:
        (mu_log, sigma_log), scalars or arrays matching the inputs
    """
    mean_arr = np.asarray(mean, dtype=float)
    sd_arr = np.asarray(sd, dtype=float)
    if np.any(~(mean_arr > 0)):
        raise DataValidationError("Moment matching needs a strictly positive mean", {'mean': mean})
    if np.any(sd_arr < 0):
        raise DataValidationError("Moment matching needs a non-negative sd", {'sd': sd})
    var_log = np.log1p((sd_arr / mean_arr) ** 2)
    mu_log = np.log(mean_arr) - 0.5 * var_log
    sigma_log = np.sqrt(var_log)
    if mu_log.ndim == 0:
        return float(mu_log), float(sigma_log)
    return mu_log, sigma_log


@dataclass
class MeasurementErrorInput:
    """
    Observed ultimate loss-ratio summaries for one program.

    ``sd`` values are floored at ``SD_FLOOR * mean``. ``prior_mean`` and
    ``prior_sd`` are the corpus-level E[r] and SD[r] used for the latent
    ratio prior; ``use_prior`` switches that prior off (flat on r').
    """
    mean: np.ndarray
    sd: np.ndarray
    prior_mean: Optional[float] = None
    prior_sd: Optional[float] = None
    use_prior: bool = True
    _raw_sd: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        sd = np.atleast_1d(np.asarray(self.sd, dtype=float))
        if self.mean.shape != sd.shape:
            raise DataValidationError("Mean and sd vectors differ in length")
        if np.any(~(self.mean > 0)):
            raise DataValidationError("Observed ultimate loss ratios must be positive")
        if np.any(sd < 0):
            raise DataValidationError("Observed ultimate sds must be non-negative")
        self._raw_sd = sd
        self.sd = np.maximum(sd, SD_FLOOR * self.mean)
        if self.use_prior:
            if self.prior_mean is None or self.prior_sd is None:
                logger.warning("No E[r]/SD[r] supplied; latent ratio prior disabled")
                self.use_prior = False
            elif not self.prior_mean > 0 or not self.prior_sd > 0:
                raise DataValidationError(
                    "Latent ratio prior needs positive E[r] and SD[r]",
                    {'prior_mean': self.prior_mean, 'prior_sd': self.prior_sd},
                )

    @property
    def n(self) -> int:
        return self.mean.size

    def subset(self, n: int) -> 'MeasurementErrorInput':
        """First ``n`` accident years."""
        return MeasurementErrorInput(
            mean=self.mean[:n], sd=self._raw_sd[:n], prior_mean=self.prior_mean,
            prior_sd=self.prior_sd, use_prior=self.use_prior,
        )


def measurement_terms(r_true: np.ndarray, me: MeasurementErrorInput) -> Tuple[float, np.ndarray]:
    """
    Log density of the observed means given latent ratios, plus the latent prior.

    The measurement scale is moment-matched at the latent ratio:
    m_i ~ Lognormal(mu_xi(r'_i, s_i), sigma_xi(r'_i, s_i)).

    Returns:
        (log density, gradient with respect to r_true)
    """
    x = np.log(r_true)
    t = (me.sd / r_true) ** 2
    var = np.log1p(t)
    mu = x - 0.5 * var
    lp, d_mu, d_log_var = lognormal_terms(np.log(me.mean), mu, np.log(var))
    d_var_dx = -2.0 * t / (1.0 + t)
    d_mu_dx = 1.0 - 0.5 * d_var_dx
    grad_x = d_mu * d_mu_dx + d_log_var * d_var_dx / var
    total = float(lp.sum())

    if me.use_prior:
        mu_r, sigma_r = lognormal_moment_match(me.prior_mean, me.prior_sd)
        lp_r, d_mu_r, _ = lognormal_terms(x, mu_r, np.full_like(x, 2.0 * np.log(sigma_r)))
        total += float(lp_r.sum())
        grad_x = grad_x - 1.0 - d_mu_r

    return total, grad_x / r_true
