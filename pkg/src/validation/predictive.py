"""
Predictive Checks
Prior and posterior predictive trajectories of a triangle plus coverage of the
observed cells by central one-step-ahead predictive intervals.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.data.triangle import Triangle
from src.inference.draws import DrawMatrix
from src.models.development.config import DevConfig
from src.models.development.simulation import DevelopmentDraws, sample_dev_prior, simulate_paths

logger = logging.getLogger(__name__)

# relative slack when comparing an observation to a degenerate interval
_TOLERANCE = 1e-9


class CheckMode(Enum):
    PRIOR = "prior"
    POSTERIOR = "posterior"


@dataclass
class PredictiveCheck:
    """Trajectories for plotting, per-cell summaries and coverage by level."""
    mode: CheckMode
    trajectories: pd.DataFrame
    cells: pd.DataFrame
    coverage: Dict[float, float]

    def to_csv(self, directory: Union[str, Path], prefix: str = '') -> Tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        trajectories = directory / f"{prefix}{self.mode.value}_trajectories.csv"
        cells = directory / f"{prefix}{self.mode.value}_cells.csv"
        self.trajectories.to_csv(trajectories, index=False, float_format='%.17g')
        self.cells.to_csv(cells, index=False, float_format='%.17g')
        return trajectories, cells


def _prior_draws(cfg: DevConfig, n_dev_lags: int, n_draws: int, rng: np.random.Generator) -> DevelopmentDraws:
    pieces = [DevelopmentDraws.from_params(*sample_dev_prior(cfg, rng, n_dev_lags)) for _ in range(n_draws)]
    return DevelopmentDraws(**{
        name: np.concatenate([getattr(p, name) for p in pieces])
        for name in DevelopmentDraws.__dataclass_fields__
    })


def predictive_check(
    t: Triangle,
    cfg: DevConfig,
    rng: np.random.Generator,
    mode: CheckMode = CheckMode.POSTERIOR,
    body: Optional[DrawMatrix] = None,
    tail: Optional[DrawMatrix] = None,
    draws: Optional[DevelopmentDraws] = None,
    n_prior_draws: int = 1000,
    n_realizations: int = 30,
    levels: Sequence[float] = (0.5, 0.9),
) -> PredictiveCheck:
    """
    Prior or posterior predictive check of the development models.

    Each observed cell with j >= 2 is compared with the one-step-ahead
    predictive given the observed previous lag. Trajectories are full paths
    from the first column through lag M, unconditioned on later cells.

    Args:
        t: Observed triangle
        cfg: Development settings
        rng: Random generator
        mode: Prior (no fitting) or posterior
        body, tail: Posterior draws (posterior mode)
        draws: Development draws, overriding body/tail or prior sampling
        n_prior_draws: Number of prior draws in prior mode
        n_realizations: Trajectories emitted per accident year
        levels: Central interval levels for coverage
    """
    mode = CheckMode(mode)
    m = t.n_dev_lags
    if draws is None:
        if mode is CheckMode.PRIOR:
            draws = _prior_draws(cfg, m, n_prior_draws, rng)
        else:
            if body is None or tail is None:
                raise ValueError("Posterior predictive checks need body and tail draws")
            draws = DevelopmentDraws.from_matrices(body, tail)

    losses = t.losses / cfg.loss_scale
    paths, _ = simulate_paths(draws, losses[:, 0], replace(cfg, j_max=m), m, rng, strict=False)
    finite = np.flatnonzero(np.isfinite(paths).all(axis=(1, 2)))
    if finite.size < draws.n_draws:
        logger.warning(f"{t.triangle_id}: {draws.n_draws - finite.size} {mode.value} paths overflowed")
    picked = rng.choice(finite, size=min(n_realizations, finite.size), replace=False)
    trajectories = _trajectory_frame(t, paths[picked] * cfg.loss_scale)

    rows = []
    for j in range(2, m + 1):
        known = t.observed[:, j - 1] & t.observed[:, j - 2]
        if not known.any():
            continue
        log_prev = np.log(losses[known, j - 2])[None, :]
        mu, log_var = draws.step(j, cfg.tau, np.repeat(log_prev, draws.n_draws, axis=0))
        with np.errstate(over='ignore'):
            simulated = np.exp(mu + np.exp(0.5 * log_var) * rng.standard_normal(mu.shape)) * cfg.loss_scale
        for col, i in enumerate(np.flatnonzero(known)):
            value = float(t.losses[i, j - 1])
            row = {
                'accident_year': t.accident_years[i],
                'dev_lag': j,
                'observed': value,
                'mean': float(np.mean(simulated[:, col])),
                'median': float(np.median(simulated[:, col])),
            }
            for level in levels:
                lo, hi = np.quantile(simulated[:, col], [(1 - level) / 2, (1 + level) / 2])
                row[f'lo_{round(level * 100)}'] = float(lo)
                row[f'hi_{round(level * 100)}'] = float(hi)
                row[f'inside_{round(level * 100)}'] = bool(
                    lo * (1 - _TOLERANCE) <= value <= hi * (1 + _TOLERANCE)
                )
            rows.append(row)

    cells = pd.DataFrame(rows)
    coverage = {
        level: float(cells[f'inside_{round(level * 100)}'].mean()) if len(cells) else float('nan')
        for level in levels
    }
    logger.info(f"{t.triangle_id}: {mode.value} predictive coverage {coverage}")
    return PredictiveCheck(mode=mode, trajectories=trajectories, cells=cells, coverage=coverage)


def _trajectory_frame(t: Triangle, paths: np.ndarray) -> pd.DataFrame:
    s, n, m = paths.shape
    realization, year, lag = np.meshgrid(np.arange(s), np.arange(n), np.arange(m), indexing='ij')
    return pd.DataFrame({
        'triangle_id': t.triangle_id,
        'realization': realization.ravel(),
        'accident_year': np.asarray(t.accident_years)[year.ravel()],
        'dev_lag': lag.ravel() + 1,
        'loss': paths.ravel(),
    })
