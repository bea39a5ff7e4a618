"""
Development Simulation
Prior draws for both development models, forward simulation from the first
column to ultimate, and per-draw age-to-age factors.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.data.triangle import Triangle
from src.inference.draws import DrawMatrix
from src.models.development.bondy import BondyParams, sample_bondy_prior
from src.models.development.chain_ladder import ChainLadderParams, sample_cl_prior
from src.models.development.config import DevConfig
from src.utils.errors import DataValidationError, ModelEvaluationError

logger = logging.getLogger(__name__)


def sample_dev_prior(
    cfg: DevConfig, rng: np.random.Generator, n_dev_lags: int
) -> Tuple[ChainLadderParams, BondyParams]:
    """Independent prior draws of the body and tail parameters."""
    return sample_cl_prior(cfg, n_dev_lags, rng), sample_bondy_prior(cfg, rng)


@dataclass
class DevelopmentDraws:
    """Body and tail parameters as aligned (S,) / (S, M-1) arrays."""
    log_alpha: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    log_omega: np.ndarray
    beta: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.gamma1.size

    @classmethod
    def from_matrices(cls, body: DrawMatrix, tail: DrawMatrix) -> 'DevelopmentDraws':
        if body.n_draws != tail.n_draws:
            raise DataValidationError(
                "Body and tail draw counts differ",
                {'body_draws': body.n_draws, 'tail_draws': tail.n_draws},
            )
        log_alpha = body.flat('log_alpha')
        return cls(
            log_alpha=log_alpha.reshape(body.n_draws, -1),
            gamma1=body.flat('gamma1'),
            gamma2=body.flat('gamma2'),
            log_omega=tail.flat('log_omega'),
            beta=1.0 / (1.0 + np.exp(-tail.flat('logit_beta'))),
            lambda1=tail.flat('lambda1'),
            lambda2=tail.flat('lambda2'),
        )

    @classmethod
    def from_params(cls, body: ChainLadderParams, tail: BondyParams) -> 'DevelopmentDraws':
        """A single draw from fixed parameters."""
        return cls(
            log_alpha=np.atleast_2d(np.asarray(body.log_alpha, dtype=float)),
            gamma1=np.array([body.gamma1]),
            gamma2=np.array([body.gamma2]),
            log_omega=np.array([tail.log_omega]),
            beta=np.array([tail.beta]),
            lambda1=np.array([tail.lambda1]),
            lambda2=np.array([tail.lambda2]),
        )

    def step(self, j: int, tau: int, log_prev: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Location and log variance of log y at lag j given log y at lag j-1, per draw."""
        if j <= tau:
            mu = self.log_alpha[:, j - 2, None] + log_prev
            log_var = (self.gamma1 + self.gamma2 * j)[:, None] + log_prev
        else:
            mu = (self.log_omega * self.beta ** j)[:, None] + log_prev
            log_var = (self.lambda1 + self.lambda2 * j)[:, None] + log_prev
        return mu, log_var

    def log_factor(self, j: int, tau: int) -> np.ndarray:
        """Per-draw log age-to-age factor into lag j."""
        if j <= tau:
            return self.log_alpha[:, j - 2]
        return self.log_omega * self.beta ** j


@dataclass
class UltimateSummary:
    """
    Posterior ultimate loss ratios per accident year.

    ``draws`` holds S x N ultimate loss ratios; ``paths`` (optional) holds
    S x N x M simulated cumulative losses on the original scale.
    """
    triangle_id: str
    accident_years: Tuple[int, ...]
    premiums: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    draws: Optional[np.ndarray] = None
    paths: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.accident_years)
        if self.mean.shape != (n,) or self.sd.shape != (n,):
            raise DataValidationError("Summary vectors must have one entry per accident year")

    @classmethod
    def from_draws(cls, t: Triangle, draws: np.ndarray, paths: Optional[np.ndarray] = None) -> 'UltimateSummary':
        sd = draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1])
        return cls(
            triangle_id=t.triangle_id,
            accident_years=tuple(t.accident_years),
            premiums=np.asarray(t.premiums, dtype=float),
            mean=draws.mean(axis=0),
            sd=sd,
            draws=draws,
            paths=paths,
        )

    @property
    def ultimate_losses(self) -> np.ndarray:
        """Draw-level ultimate losses, S x N."""
        if self.draws is None:
            raise DataValidationError("Draw-level ultimates were not retained", {'triangle_id': self.triangle_id})
        return self.draws * self.premiums[None, :]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'triangle_id': self.triangle_id,
            'accident_year': list(self.accident_years),
            'premium': self.premiums,
            'mean_ultimate_lr': self.mean,
            'sd_ultimate_lr': self.sd,
        })

    def draws_frame(self) -> pd.DataFrame:
        s, n = self.draws.shape
        return pd.DataFrame({
            'triangle_id': self.triangle_id,
            'accident_year': np.tile(np.asarray(self.accident_years), s),
            'draw': np.repeat(np.arange(s), n),
            'ultimate_lr': self.draws.ravel(),
        })

    def to_csv(self, path: Union[str, Path], draws_path: Optional[Union[str, Path]] = None) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.17g')
        if draws_path is not None and self.draws is not None:
            self.draws_frame().to_csv(draws_path, index=False, float_format='%.17g')


def read_ultimate_summaries(path: Union[str, Path]) -> dict:
    """Load summary rows written by ``UltimateSummary.to_csv`` (possibly concatenated)."""
    frame = pd.read_csv(path)
    summaries = {}
    for triangle_id, group in frame.groupby('triangle_id', sort=False):
        group = group.sort_values('accident_year')
        summaries[str(triangle_id)] = UltimateSummary(
            triangle_id=str(triangle_id),
            accident_years=tuple(int(a) for a in group['accident_year']),
            premiums=group['premium'].to_numpy(dtype=float),
            mean=group['mean_ultimate_lr'].to_numpy(dtype=float),
            sd=group['sd_ultimate_lr'].to_numpy(dtype=float),
        )
    return summaries


def simulate_paths(
    params: DevelopmentDraws,
    first_column: np.ndarray,
    cfg: DevConfig,
    n_dev_lags: int,
    rng: np.random.Generator,
    observed: Optional[np.ndarray] = None,
    strict: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Propagate every draw from lag 1 to the ultimate horizon.

    Args:
        params: Aligned development draws
        first_column: y_i1 on the model's loss scale, length N
        cfg: Development settings (tau and horizon)
        n_dev_lags: M; paths are stored for lags 1..M
        rng: Random generator
        observed: Optional N x M losses (model scale) whose non-NaN cells are kept
        strict: Raise on overflow; otherwise overflowing paths become NaN

    Returns:
        (paths S x N x M, ultimates S x N), both on the model's loss scale
    """
    s, n = params.n_draws, first_column.size
    horizon = cfg.horizon(n_dev_lags)
    paths = np.empty((s, n, n_dev_lags))
    log_current = np.tile(np.log(first_column), (s, 1))
    paths[:, :, 0] = np.exp(log_current)

    with np.errstate(over='ignore', invalid='ignore'):
        for j in range(2, horizon + 1):
            mu, log_var = params.step(j, cfg.tau, log_current)
            log_current = mu + np.exp(0.5 * log_var) * rng.standard_normal((s, n))
            if observed is not None and j <= n_dev_lags:
                known = ~np.isnan(observed[:, j - 1])
                log_current[:, known] = np.log(observed[known, j - 1])
            bad = ~np.isfinite(log_current) | (log_current > 700.0)
            if bad.any() and not strict:
                log_current[bad] = np.nan
            elif bad.any():
                draw, row = (int(v) for v in np.argwhere(bad)[0])
                raise ModelEvaluationError(
                    "Forward simulation overflowed",
                    {'draw': draw, 'accident_year': row + 1, 'lag': j},
                )
            if j <= n_dev_lags:
                paths[:, :, j - 1] = np.exp(log_current)
    return paths, np.exp(log_current)


def simulate_development(
    body: DrawMatrix,
    tail: DrawMatrix,
    t: Triangle,
    cfg: DevConfig,
    rng: np.random.Generator,
    condition_on_observed: bool = True,
    keep_paths: bool = False,
) -> UltimateSummary:
    """
    Simulate ultimate loss ratios for every accident year of a triangle.

    Body and tail draws are paired by draw index. Chain-ladder drives lags up
    to tau and Bondy beyond, up to the configured horizon.

    Args:
        body: Chain-ladder posterior draws
        tail: Bondy posterior draws
        t: Triangle whose first column seeds the simulation
        cfg: Development settings
        rng: Random generator
        condition_on_observed: Keep observed cells at their values
        keep_paths: Retain lag-by-lag paths for lags 1..M

    Returns:
        UltimateSummary with draw-level ultimates
    """
    params = DevelopmentDraws.from_matrices(body, tail)
    if params.log_alpha.shape[1] < min(cfg.tau, t.n_dev_lags) - 1:
        raise DataValidationError(
            "Body draws do not cover the lags up to tau",
            {'log_alpha_len': params.log_alpha.shape[1], 'tau': cfg.tau},
        )
    losses = t.losses / cfg.loss_scale
    observed = losses if condition_on_observed else None
    paths, ultimates = simulate_paths(params, losses[:, 0], cfg, t.n_dev_lags, rng, observed)

    ultimate_lr = ultimates * cfg.loss_scale / t.premiums[None, :]
    logger.debug(f"{t.triangle_id}: simulated {params.n_draws} ultimates to lag {cfg.horizon(t.n_dev_lags)}")
    return UltimateSummary.from_draws(
        t, ultimate_lr, paths * cfg.loss_scale if keep_paths else None
    )


def development_factors(body: DrawMatrix, tail: DrawMatrix, cfg: DevConfig, n_lags: int) -> np.ndarray:
    """
    Per-draw age-to-age factors under the prediction regime.

    Returns:
        S x (n_lags - 1) array; column k-1 is the factor from lag k to lag k+1
    """
    params = DevelopmentDraws.from_matrices(body, tail)
    return np.column_stack([
        np.exp(params.log_factor(j, cfg.tau)) for j in range(2, n_lags + 1)
    ])
