"""
Cashflow Walk-Back
Turns forecast ultimate losses into lag-by-lag cumulative loss paths by
dividing through the age-to-age factor draws, and summarizes them.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.utils.errors import DataValidationError

logger = logging.getLogger(__name__)

DEFAULT_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class CashflowPaths:
    """
    Cumulative loss paths per draw, accident year and lag.

    ``paths`` is S x K x M; ``paths[:, :, -1]`` equals the ultimate draws.
    """
    triangle_id: str
    accident_years: Tuple[int, ...]
    premiums: np.ndarray
    paths: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.paths.shape[0]

    @property
    def n_lags(self) -> int:
        return self.paths.shape[2]

    @property
    def ultimate(self) -> np.ndarray:
        return self.paths[:, :, -1]

    @property
    def incremental(self) -> np.ndarray:
        """Per-lag increments; lag 1 keeps its cumulative value."""
        return np.diff(self.paths, axis=2, prepend=0.0)

    def to_frame(self) -> pd.DataFrame:
        s, k, m = self.paths.shape
        draw, year, lag = np.meshgrid(np.arange(s), np.arange(k), np.arange(m), indexing='ij')
        return pd.DataFrame({
            'triangle_id': self.triangle_id,
            'accident_year': np.asarray(self.accident_years)[year.ravel()],
            'draw': draw.ravel(),
            'dev_lag': lag.ravel() + 1,
            'paid_loss': self.paths.ravel(),
        })

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.17g')
        return path


def walkback(
    ultimates: np.ndarray,
    factors: np.ndarray,
    premiums: Optional[Sequence[float]] = None,
    accident_years: Optional[Sequence[int]] = None,
    triangle_id: str = '',
) -> CashflowPaths:
    """
    Walk ultimate losses back through age-to-age factors.

    y_(j) = y_(j+1) / alpha_j for j = M-1 down to 1, per draw, with no added
    noise. Draw s of the ultimates is paired with draw s of the factors.

    Args:
        ultimates: S x K ultimate losses (or length-S for a single year)
        factors: S x (M-1) factors; column j-1 takes lag j to lag j+1
        premiums: Premiums per accident year for netting
        accident_years: Labels of the K years
        triangle_id: Label carried into the output

    Returns:
        CashflowPaths
    """
    ultimates = np.asarray(ultimates, dtype=float)
    if ultimates.ndim == 1:
        ultimates = ultimates[:, None]
    factors = np.atleast_2d(np.asarray(factors, dtype=float))
    s, k = ultimates.shape
    if factors.shape[0] != s:
        raise DataValidationError(
            "Ultimate and factor draws are not aligned",
            {'ultimate_draws': s, 'factor_draws': factors.shape[0]},
        )
    if np.any(~(factors > 0)):
        bad = np.argwhere(~(factors > 0))[0]
        raise DataValidationError(
            "Age-to-age factors must be positive",
            {'draw': int(bad[0]), 'lag': int(bad[1]) + 1, 'factor': float(factors[tuple(bad)])},
        )
    if np.any(~(ultimates > 0)):
        raise DataValidationError("Ultimate losses must be positive")

    m = factors.shape[1] + 1
    paths = np.empty((s, k, m))
    paths[:, :, -1] = ultimates
    for j in range(m - 1, 0, -1):
        paths[:, :, j - 1] = paths[:, :, j] / factors[:, [j - 1]]

    premiums = np.full(k, np.nan) if premiums is None else np.asarray(premiums, dtype=float)
    if premiums.shape != (k,):
        raise DataValidationError("Premiums must have one entry per accident year",
                                  {'years': k, 'premiums': premiums.size})
    years = tuple(accident_years) if accident_years is not None else tuple(range(1, k + 1))
    logger.debug(f"{triangle_id}: walked back {s} draws over {m} lags for {k} years")
    return CashflowPaths(triangle_id=triangle_id, accident_years=years, premiums=premiums, paths=paths)


def develop_forward(first_lag: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """Inverse of the walk-back: cumulative products from lag 1, S x K x M."""
    first_lag = np.asarray(first_lag, dtype=float)
    if first_lag.ndim == 1:
        first_lag = first_lag[:, None]
    growth = np.concatenate([np.ones((factors.shape[0], 1)), np.cumprod(factors, axis=1)], axis=1)
    return first_lag[:, :, None] * growth[:, None, :]


def cashflow_summary(paths: CashflowPaths, quantiles: Sequence[float] = DEFAULT_QUANTILES) -> pd.DataFrame:
    """
    Per accident year and lag: quantiles of cumulative paid, incremental paid
    and the net position premium - cumulative paid.

    Quantiles interpolate linearly between order statistics.
    """
    quantiles = list(quantiles)
    if not quantiles:
        raise DataValidationError("At least one quantile is required")
    if any(not 0.0 <= q <= 1.0 for q in quantiles):
        raise DataValidationError("Quantiles must lie in [0, 1]", {'quantiles': quantiles})

    measures = {
        'paid': paths.paths,
        'incremental': paths.incremental,
        'net': paths.premiums[None, :, None] - paths.paths,
    }
    rows = []
    for measure, values in measures.items():
        q = np.quantile(values, quantiles, axis=0)  # Q x K x M
        mean = values.mean(axis=0)
        for yi, year in enumerate(paths.accident_years):
            for j in range(paths.n_lags):
                row = {
                    'triangle_id': paths.triangle_id,
                    'accident_year': year,
                    'dev_lag': j + 1,
                    'measure': measure,
                    'mean': float(mean[yi, j]),
                }
                row.update({f'q{round(p * 100, 1):g}': float(q[n, yi, j]) for n, p in enumerate(quantiles)})
                rows.append(row)
    return pd.DataFrame(rows)
