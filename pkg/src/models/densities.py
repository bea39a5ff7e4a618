"""
Density Building Blocks
Normal and lognormal log-density terms with their analytic derivatives,
shared by the development and forecasting models.
"""

import math
from typing import Tuple, Union

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)

ArrayLike = Union[float, np.ndarray]


def normal_prior(x: ArrayLike, loc: float, scale: float) -> Tuple[float, ArrayLike]:
    """Summed Normal(loc, scale) log density and its gradient in x."""
    r = (np.asarray(x, dtype=float) - loc) / scale
    lp = np.sum(-0.5 * r * r - math.log(scale) - 0.5 * LOG_2PI)
    grad = -r / scale
    return float(lp), (float(grad) if np.ndim(grad) == 0 else grad)


def half_normal_prior(x: ArrayLike, scale: float) -> Tuple[float, ArrayLike]:
    """Normal(0, scale) truncated to x >= 0."""
    lp, grad = normal_prior(x, 0.0, scale)
    return lp + LOG_2 * np.size(x), grad


def lognormal_terms(
    log_y: np.ndarray, mu: np.ndarray, log_var: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Elementwise lognormal log density parameterized by log variance.

    Args:
        log_y: log of the observed values
        mu: location on the log scale
        log_var: log of the log-scale variance

    Returns:
        (log density, d/d mu, d/d log_var), all elementwise
    """
    var = np.exp(log_var)
    r = log_y - mu
    lp = -log_y - 0.5 * (LOG_2PI + log_var) - r * r / (2.0 * var)
    d_mu = r / var
    d_log_var = -0.5 + r * r / (2.0 * var)
    return lp, d_mu, d_log_var


def normal_terms(
    x: np.ndarray, mean: np.ndarray, var: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Elementwise Normal(mean, sqrt(var)) log density with d/dx, d/dmean, d/dvar."""
    r = x - mean
    lp = -0.5 * (LOG_2PI + np.log(var)) - r * r / (2.0 * var)
    d_x = -r / var
    d_var = -0.5 / var + r * r / (2.0 * var * var)
    return lp, d_x, -d_x, d_var
