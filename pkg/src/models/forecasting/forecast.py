"""
Forecasting
Single-program fitting, observation-level predictive distributions, and
forward simulation of future accident years' ultimate loss ratios.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from src.inference.draws import DrawMatrix
from src.inference.sampler import SamplerConfig, sample
from src.models.densities import LOG_2PI
from src.models.forecasting.measurement import MeasurementErrorInput
from src.models.forecasting.state_space import (
    ForecastPriors,
    ModelKind,
    StateSpaceModel,
)
from src.utils.errors import ConfigError, DataValidationError

logger = logging.getLogger(__name__)


def fit_forecast(kind: ModelKind, me: MeasurementErrorInput, premiums: np.ndarray,
                 priors: Optional[ForecastPriors] = None, measurement_error: bool = True,
                 sampler_cfg: Optional[SamplerConfig] = None) -> DrawMatrix:
    """Fit a non-hierarchical forecaster to one program."""
    model = StateSpaceModel(kind, me, premiums, priors=priors, measurement_error=measurement_error)
    return sample(model, sampler_cfg)


@dataclass
class _DrawView:
    eta: np.ndarray        # S x N
    log_eps: np.ndarray    # S
    fc_gamma: np.ndarray   # S x 2
    mu: np.ndarray         # S
    phi: np.ndarray        # S

    @classmethod
    def of(cls, draws: DrawMatrix, kind: ModelKind) -> '_DrawView':
        s = draws.n_draws
        eta = draws.flat('eta').reshape(s, -1)
        if kind is ModelKind.MEAN_REVERSION:
            mu = draws.flat('mu')
            phi = expit(draws.flat('logit_phi'))
        else:
            mu, phi = np.zeros(s), np.ones(s)
        return cls(eta=eta, log_eps=draws.flat('log_eps'),
                   fc_gamma=draws.flat('fc_gamma').reshape(s, 2), mu=mu, phi=phi)

    def obs_variance(self, premiums: np.ndarray) -> np.ndarray:
        """S x K observation variances."""
        return (np.exp(2.0 * self.fc_gamma[:, [0]])
                + np.exp(2.0 * self.fc_gamma[:, [1]]) / np.sqrt(premiums)[None, :])

    def latent_moments(self, h: int) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and variance of eta_(N+h) given eta_N, per draw."""
        last = self.eta[:, -1]
        phi_h = self.phi ** h
        mean = self.mu + phi_h * (last - self.mu)
        # sum_{k<h} phi^(2k); equals h when phi = 1
        powers = self.phi[:, None] ** (2 * np.arange(h))[None, :]
        var = np.exp(2.0 * self.log_eps) * powers.sum(axis=1)
        return mean, var


@dataclass
class PredictiveDistribution:
    """
    Lognormal observation-level predictive per posterior draw.

    ``loc`` and ``scale`` are S x K; column k corresponds to
    ``accident_years[k]``. In-sample columns come first, forecast columns
    follow.
    """
    loc: np.ndarray
    scale: np.ndarray
    accident_years: Tuple[int, ...]
    premiums: np.ndarray
    n_in_sample: int

    @property
    def n_draws(self) -> int:
        return self.loc.shape[0]

    def column(self, accident_year: int) -> int:
        try:
            return self.accident_years.index(accident_year)
        except ValueError:
            raise KeyError(f"Accident year {accident_year} is not in the predictive") from None

    def log_density(self, loss_ratio: float, k: int) -> np.ndarray:
        """Per-draw lognormal log density of a loss ratio at column k."""
        if not loss_ratio > 0:
            return np.full(self.n_draws, -np.inf)
        log_r = np.log(loss_ratio)
        z = (log_r - self.loc[:, k]) / self.scale[:, k]
        return -log_r - np.log(self.scale[:, k]) - 0.5 * LOG_2PI - 0.5 * z * z

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One loss-ratio draw per posterior draw and column, S x K."""
        return np.exp(self.loc + self.scale * rng.standard_normal(self.loc.shape))


def _future_premiums(premiums_future: Optional[Sequence[float]], premiums_history: Optional[np.ndarray],
                     horizon: int) -> np.ndarray:
    if premiums_future is not None:
        future = np.asarray(premiums_future, dtype=float)
        if future.shape != (horizon,):
            raise DataValidationError(
                "Future premiums must have one entry per forecast year",
                {'horizon': horizon, 'premiums': future.size},
            )
        if np.any(~(future > 0)):
            raise DataValidationError("Future premiums must be strictly positive")
        return future
    if premiums_history is None or len(premiums_history) == 0:
        raise DataValidationError("Future premiums are required for forecasting")
    logger.warning("Future premiums not supplied; using the last observed premium")
    return np.full(horizon, float(premiums_history[-1]))


def predictive_distribution(
    draws: DrawMatrix,
    kind: ModelKind,
    premiums: np.ndarray,
    horizon: int = 0,
    premiums_future: Optional[Sequence[float]] = None,
    accident_years: Optional[Sequence[int]] = None,
) -> PredictiveDistribution:
    """
    Observation-level predictive for in-sample and future accident years.

    In-sample year i uses Lognormal(eta_i, sigma_i). Future year N+h
    marginalizes the latent innovations analytically:
    Lognormal(E[eta_(N+h)], sqrt(Var[eta_(N+h)] + sigma^2)).

    Args:
        draws: Posterior draws of a single-program forecaster
        kind: Random walk or mean reversion
        premiums: In-sample premiums, length N
        horizon: Number of future years
        premiums_future: Future premiums (defaults to the last premium)
        accident_years: Labels for the in-sample years (1..N by default)
    """
    view = _DrawView.of(draws, kind)
    premiums = np.asarray(premiums, dtype=float)
    n = view.eta.shape[1]
    if premiums.shape != (n,):
        raise DataValidationError("Premiums must match the number of latent states",
                                  {'latent_states': n, 'premiums': premiums.size})
    years = list(accident_years) if accident_years is not None else list(range(1, n + 1))
    loc, scale, prem = [view.eta], [np.sqrt(view.obs_variance(premiums))], [premiums]

    if horizon > 0:
        future = _future_premiums(premiums_future, premiums, horizon)
        obs_var = view.obs_variance(future)
        for h in range(1, horizon + 1):
            mean, var = view.latent_moments(h)
            loc.append(mean[:, None])
            scale.append(np.sqrt(var + obs_var[:, h - 1])[:, None])
        prem.append(future)
        years += [years[-1] + h for h in range(1, horizon + 1)]

    return PredictiveDistribution(
        loc=np.hstack(loc), scale=np.hstack(scale), accident_years=tuple(years),
        premiums=np.concatenate(prem), n_in_sample=n,
    )


@dataclass
class ForecastDraws:
    """Draw-level forecasts of future ultimate loss ratios and losses."""
    triangle_id: str
    accident_years: Tuple[int, ...]
    loss_ratio: np.ndarray   # S x K
    premiums: np.ndarray     # K

    @property
    def loss(self) -> np.ndarray:
        return self.loss_ratio * self.premiums[None, :]

    def to_frame(self) -> pd.DataFrame:
        s, k = self.loss_ratio.shape
        return pd.DataFrame({
            'triangle_id': self.triangle_id,
            'accident_year': np.tile(np.asarray(self.accident_years), s),
            'draw': np.repeat(np.arange(s), k),
            'loss_ratio': self.loss_ratio.ravel(),
            'loss': self.loss.ravel(),
        })

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.17g')
        return path


def read_forecast_draws(path: Union[str, Path]) -> dict:
    """Load forecast CSVs back into ForecastDraws keyed by triangle id."""
    frame = pd.read_csv(path)
    out = {}
    for triangle_id, group in frame.groupby('triangle_id', sort=False):
        years = tuple(sorted(int(a) for a in group['accident_year'].unique()))
        pivot = group.pivot(index='draw', columns='accident_year', values='loss_ratio')[list(years)]
        loss = group.pivot(index='draw', columns='accident_year', values='loss')[list(years)]
        ratio = pivot.to_numpy(dtype=float)
        out[str(triangle_id)] = ForecastDraws(
            triangle_id=str(triangle_id),
            accident_years=years,
            loss_ratio=ratio,
            premiums=(loss.to_numpy(dtype=float) / ratio)[0],
        )
    return out


def forecast(
    draws: DrawMatrix,
    kind: ModelKind,
    horizon: int,
    premiums_future: Optional[Sequence[float]],
    rng: np.random.Generator,
    premiums_history: Optional[np.ndarray] = None,
    triangle_id: str = '',
    last_accident_year: Optional[int] = None,
) -> ForecastDraws:
    """
    Roll the latent state forward and draw observation-level loss ratios.

    Args:
        draws: Posterior draws of a single-program forecaster
        kind: Random walk or mean reversion
        horizon: Number of future accident years (>= 1)
        premiums_future: Premiums of the future years; None falls back to the
            last entry of ``premiums_history`` with a warning
        rng: Random generator
        premiums_history: In-sample premiums
        triangle_id: Label carried into the output
        last_accident_year: Label of year N (defaults to the number of latent states)

    Returns:
        ForecastDraws for years N+1..N+horizon
    """
    if horizon < 1:
        raise ConfigError("Forecast horizon must be >= 1", {'horizon': horizon})
    view = _DrawView.of(draws, kind)
    future = _future_premiums(premiums_future, premiums_history, horizon)
    s, n = view.eta.shape
    obs_sd = np.sqrt(view.obs_variance(future))
    eps = np.exp(view.log_eps)

    state = view.eta[:, -1].copy()
    ratios = np.empty((s, horizon))
    for h in range(horizon):
        state = view.mu * (1.0 - view.phi) + view.phi * state + eps * rng.standard_normal(s)
        ratios[:, h] = np.exp(state + obs_sd[:, h] * rng.standard_normal(s))

    last = last_accident_year if last_accident_year is not None else n
    return ForecastDraws(
        triangle_id=triangle_id,
        accident_years=tuple(last + h for h in range(1, horizon + 1)),
        loss_ratio=ratios,
        premiums=future,
    )
