"""Convergence diagnostics (split R-hat, ESS, MCSE) and gradient checking."""

import logging
from typing import Optional

import numpy as np

from src.inference.draws import DrawMatrix
from src.inference.model import LogDensityModel
from src.utils.errors import ModelEvaluationError, UndefinedDiagnosticError

logger = logging.getLogger(__name__)


def _chains(d: DrawMatrix, quantity: str) -> np.ndarray:
    values = d.scalar(quantity)
    n_chains, n_iter = values.shape
    if n_chains < 2:
        raise ValueError(f"{quantity}: at least 2 chains are required, got {n_chains}")
    if n_iter < 4:
        raise ValueError(f"{quantity}: at least 4 draws per chain are required, got {n_iter}")
    return values


def rhat(d: DrawMatrix, quantity: str) -> float:
    """Split-chain potential scale reduction factor."""
    values = _chains(d, quantity)
    half = values.shape[1] // 2
    split = np.concatenate([values[:, :half], values[:, -half:]], axis=0)
    n = split.shape[1]

    within = split.var(axis=1, ddof=1).mean()
    if not within > 0:
        raise UndefinedDiagnosticError(
            "R-hat is undefined for zero within-chain variance", {'quantity': quantity}
        )
    between_over_n = split.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * within + between_over_n
    return float(np.sqrt(var_plus / within))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of a 1-D series via FFT."""
    n = x.size
    centered = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centered, n=size)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size)[:n]
    return acov / n


def ess(d: DrawMatrix, quantity: str) -> float:
    """
    Effective sample size from the multi-chain autocorrelation sum.

    Paired autocorrelations rho_2k + rho_2k+1 are summed until the first
    negative pair.
    """
    values = _chains(d, quantity)
    n_chains, n = values.shape

    acov = np.stack([_autocovariance(chain) for chain in values])
    chain_var = acov[:, 0] * n / (n - 1.0)
    within = chain_var.mean()
    if not within > 0:
        raise UndefinedDiagnosticError(
            "ESS is undefined for zero within-chain variance", {'quantity': quantity}
        )
    var_plus = within * (n - 1.0) / n + values.mean(axis=1).var(ddof=1)

    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    tau = -1.0
    for t in range(0, n - 1, 2):
        paired = rho[t] + rho[t + 1]
        if paired < 0:
            break
        tau += 2.0 * paired
    tau = max(tau, 1.0 / np.log10(n_chains * n))
    return float(n_chains * n / tau)


def mcse(d: DrawMatrix, quantity: str) -> float:
    """Monte Carlo standard error of the posterior mean."""
    values = d.scalar(quantity)
    return float(values.std(ddof=1) / np.sqrt(ess(d, quantity)))


def max_rhat(d: DrawMatrix, quantities: Optional[list] = None) -> float:
    """Largest split R-hat across quantities; zero-variance quantities are skipped."""
    worst = 1.0
    for label in quantities or d.scalar_labels():
        try:
            worst = max(worst, rhat(d, label))
        except (UndefinedDiagnosticError, ValueError):
            continue
    return worst


def check_gradient(model: LogDensityModel, point: np.ndarray, eps: float = 1e-5) -> float:
    """
    Compare the analytic gradient with central finite differences.

    The step for coordinate k is ``eps * max(1, |z_k|)`` and the error is
    |analytic - numeric| / max(1, |analytic|, |numeric|).

    Returns:
        Largest error over coordinates
    """
    point = np.asarray(point, dtype=float)
    lp, grad = model.log_density(point)
    if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
        raise ModelEvaluationError("Non-finite density at gradient-check point", {'model': model.name})

    worst = 0.0
    for k in range(point.size):
        h = eps * max(1.0, abs(point[k]))
        up, down = point.copy(), point.copy()
        up[k] += h
        down[k] -= h
        lp_up, _ = model.log_density(up)
        lp_down, _ = model.log_density(down)
        if not (np.isfinite(lp_up) and np.isfinite(lp_down)):
            raise ModelEvaluationError(
                "Non-finite density within the finite-difference stencil",
                {'model': model.name, 'coordinate': k},
            )
        numeric = (lp_up - lp_down) / (2.0 * h)
        error = abs(grad[k] - numeric) / max(1.0, abs(grad[k]), abs(numeric))
        worst = max(worst, error)
    return float(worst)
