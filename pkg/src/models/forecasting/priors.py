"""Data-driven priors for single-program forecasters from a hierarchical fit."""

import logging
from dataclasses import replace
from typing import Optional

from src.inference.diagnostics import max_rhat
from src.inference.draws import DrawMatrix
from src.models.forecasting.state_space import ForecastPriors
from src.utils.errors import ConvergenceError

logger = logging.getLogger(__name__)

HYPER_QUANTITIES = ('eps_mu', 'log_eps_sigma', 'eta_mu0', 'log_eta_sigma0')


def derive_priors(
    hier: DrawMatrix,
    inflation: float = 1.0,
    rhat_threshold: float = 1.01,
    base: Optional[ForecastPriors] = None,
) -> ForecastPriors:
    """
    Plug group-level posterior means in as priors.

    log eps ~ Normal(E[eps_mu], inflation * E[eps_sigma]) and
    eta0 ~ Normal(E[eta_mu0], inflation * E[eta_sigma0]); the remaining
    priors come from ``base``.

    Args:
        hier: Draws of a hierarchical forecaster
        inflation: Multiplier on the derived scales (> 0), for small groups
        rhat_threshold: Largest acceptable split R-hat over the hyperparameters
        base: Priors for the parameters that are not pooled

    Raises:
        ConvergenceError: if the hyperparameters have not converged
    """
    if inflation <= 0:
        raise ValueError(f"inflation must be positive, got {inflation}")
    if hier.n_chains < 2:
        raise ConvergenceError("Convergence of the hierarchical fit cannot be checked with one chain")
    worst = max_rhat(hier, list(HYPER_QUANTITIES))
    if worst > rhat_threshold:
        raise ConvergenceError(
            "Hierarchical fit has not converged; refusing to derive priors",
            {'max_rhat': round(worst, 4), 'threshold': rhat_threshold},
        )

    base = base or ForecastPriors()
    derived = replace(
        base,
        log_eps=(float(hier.flat('eps_mu').mean()), float(hier.flat('eps_sigma').mean()) * inflation),
        eta0=(float(hier.flat('eta_mu0').mean()), float(hier.flat('eta_sigma0').mean()) * inflation),
    )
    logger.info(f"Derived priors: log_eps ~ N{derived.log_eps}, eta0 ~ N{derived.eta0}")
    return derived
