"""
Backtest Metrics
Log predictive density, RMSE and predictive percentiles per target, the score
table that collects them, and paired model comparisons.
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from src.utils.errors import DataValidationError

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ['line', 'triangle_id', 'model', 'split', 'accident_year', 'ultimate', 'lpd', 'rmse', 'percentile']
SPLITS = ('test', 'validation')


def lpd(log_densities: Sequence[float]) -> float:
    """
    log of the Monte Carlo mean of per-draw predictive densities.

    Returns -inf when every density underflows.
    """
    values = np.asarray(log_densities, dtype=float)
    if values.size == 0:
        raise ValueError("lpd needs at least one draw")
    if np.any(np.isnan(values)):
        raise DataValidationError("Per-draw log densities contain NaN")
    if np.all(np.isneginf(values)):
        return -math.inf
    return float(logsumexp(values) - math.log(values.size))


def rmse(true_value: float, draws: Sequence[float]) -> float:
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise ValueError("rmse needs at least one draw")
    return float(np.sqrt(np.mean((draws - true_value) ** 2)))


def percentile(true_value: float, draws: Sequence[float]) -> float:
    """Fraction of predictive draws strictly below the true value."""
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise ValueError("percentile needs at least one draw")
    return float(np.mean(draws < true_value))


def calibration_histogram(percentiles: Sequence[float], bins: int = 20) -> np.ndarray:
    """Counts of predictive percentiles in equal-width bins over [0, 1]."""
    values = np.asarray(percentiles, dtype=float)
    if np.any((values < 0) | (values > 1)):
        raise DataValidationError("Percentiles must lie in [0, 1]")
    index = np.minimum(np.floor(values * bins).astype(int), bins - 1)
    return np.bincount(index, minlength=bins)


class ScoreTable:
    """Per-target scores keyed by line, triangle, model, split and accident year."""

    def __init__(self, frame: Optional[pd.DataFrame] = None):
        self._rows: List[dict] = []
        self._frame = frame if frame is not None else pd.DataFrame(columns=SCORE_COLUMNS)

    def add(self, line: str, triangle_id: str, model: str, split: str, accident_year: int,
            ultimate: float, lpd_value: float, rmse_value: float, percentile_value: float) -> None:
        if split not in SPLITS:
            raise ValueError(f"Unknown split: {split}")
        self._rows.append({
            'line': line, 'triangle_id': triangle_id, 'model': model, 'split': split,
            'accident_year': int(accident_year), 'ultimate': float(ultimate),
            'lpd': lpd_value, 'rmse': rmse_value, 'percentile': percentile_value,
        })

    @property
    def frame(self) -> pd.DataFrame:
        if self._rows:
            new = pd.DataFrame(self._rows, columns=SCORE_COLUMNS)
            self._frame = new if self._frame.empty else pd.concat([self._frame, new], ignore_index=True)
            self._rows = []
        return self._frame

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def models(self) -> List[str]:
        return list(dict.fromkeys(self.frame['model']))

    @property
    def lines(self) -> List[str]:
        return list(dict.fromkeys(self.frame['line']))

    def select(self, model: Optional[str] = None, split: Optional[str] = None,
               line: Optional[str] = None) -> pd.DataFrame:
        frame = self.frame
        mask = pd.Series(True, index=frame.index)
        if model is not None:
            mask &= frame['model'] == model
        if split is not None:
            mask &= frame['split'] == split
        if line is not None:
            mask &= frame['line'] == line
        return frame[mask]

    def elpd(self, model: str, split: str = 'validation', line: Optional[str] = None) -> float:
        """Sum of LPD over the selected targets."""
        return float(self.select(model, split, line)['lpd'].sum())

    def lpd_matrix(self, models: Sequence[str], split: str = 'test',
                   line: Optional[str] = None) -> pd.DataFrame:
        """Targets x models LPD matrix, rows keyed by (line, triangle_id, accident_year)."""
        frame = self.select(split=split, line=line)
        frame = frame[frame['model'].isin(models)]
        pivot = frame.pivot_table(index=['line', 'triangle_id', 'accident_year'],
                                  columns='model', values='lpd', aggfunc='first')
        return pivot[list(models)]

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False, float_format='%.17g')
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> 'ScoreTable':
        frame = pd.read_csv(path, dtype={'triangle_id': str, 'line': str})
        missing = set(SCORE_COLUMNS) - set(frame.columns)
        if missing:
            raise DataValidationError("Score table is missing columns", {'missing': sorted(missing)})
        return cls(frame[SCORE_COLUMNS])


@dataclass
class Comparison:
    """Paired comparison of model a against model b on one split."""
    model_a: str
    model_b: str
    split: str
    line: Optional[str]
    n: int
    elpd_a: float
    elpd_b: float
    elpd_diff: float
    elpd_se: float
    rmse_diff: float
    rmse_se: float
    n_dropped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _paired(scores: ScoreTable, a: str, b: str, split: str, line: Optional[str]) -> pd.DataFrame:
    keys = ['line', 'triangle_id', 'accident_year']
    left = scores.select(a, split, line).set_index(keys)[['lpd', 'rmse']]
    right = scores.select(b, split, line).set_index(keys)[['lpd', 'rmse']]
    if set(left.index) != set(right.index):
        raise DataValidationError(
            "Models were scored on different targets",
            {'model_a': a, 'model_b': b, 'split': split, 'n_a': len(left), 'n_b': len(right)},
        )
    return left.join(right, lsuffix='_a', rsuffix='_b')


def _sum_and_se(d: np.ndarray) -> tuple:
    g = d.size
    if g < 2 or not np.all(np.isfinite(d)):
        return float(d.sum()), math.nan
    return float(d.sum()), math.sqrt(g * np.var(d, ddof=1))


def _mean_and_se(d: np.ndarray) -> tuple:
    g = d.size
    if g == 0:
        return math.nan, math.nan
    se = math.sqrt(np.var(d, ddof=1) / g) if g >= 2 else math.nan
    return float(d.mean()), float(se)


def elpd_and_diff(scores: ScoreTable, a: str, b: str, split: str = 'validation',
                  line: Optional[str] = None) -> Comparison:
    """
    ELPD of both models, the summed pointwise difference and its standard error.

    SE = sqrt(G * sample variance of the pointwise differences); NaN for G < 2.
    Targets on which both models have an LPD of -inf are left out of every
    figure and counted in ``n_dropped``. If only one model is -inf on a
    target the difference is +inf or -inf and the SE is NaN.

    RMSE is compared by the mean pointwise difference, with
    SE = sample sd / sqrt(G), over the same targets.
    """
    paired = _paired(scores, a, b, split, line)
    both_inf = np.isneginf(paired['lpd_a']) & np.isneginf(paired['lpd_b'])
    n_dropped = int(both_inf.sum())
    if n_dropped:
        logger.warning(f"{a} vs {b} ({split}, {line or 'pooled'}): "
                       f"{n_dropped} targets with -inf LPD under both models left out")
        paired = paired[~both_inf]

    lpd_a = paired['lpd_a'].to_numpy(dtype=float)
    lpd_b = paired['lpd_b'].to_numpy(dtype=float)
    with np.errstate(invalid='ignore'):
        d = lpd_a - lpd_b
    diff, se = _sum_and_se(d)
    rmse_diff, rmse_se = _mean_and_se((paired['rmse_a'] - paired['rmse_b']).to_numpy(dtype=float))
    return Comparison(
        model_a=a, model_b=b, split=split, line=line, n=int(d.size),
        elpd_a=float(lpd_a.sum()), elpd_b=float(lpd_b.sum()),
        elpd_diff=diff, elpd_se=se, rmse_diff=rmse_diff, rmse_se=rmse_se,
        n_dropped=n_dropped,
    )
