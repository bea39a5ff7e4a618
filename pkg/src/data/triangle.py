"""
Loss Triangle Data Model
Cumulative-loss run-off triangles, loss ratios, and long-CSV ingestion.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.utils.errors import DataValidationError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    'triangle_id', 'line', 'accident_year', 'dev_lag', 'cumulative_loss', 'earned_premium'
)
KNOWN_LINES = ('PP', 'WC', 'CA', 'OO')


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Triangle:
    """
    Cumulative-loss triangle for one program.

    ``losses`` is an N x M array with NaN marking unobserved cells; row i and
    column j hold y_(i+1)(j+1). Accident-year and lag labels are the values
    from the source file and are metadata only.
    """
    triangle_id: str
    line: str
    losses: np.ndarray
    premiums: np.ndarray
    accident_years: Tuple[int, ...] = ()
    dev_lag_labels: Tuple[int, ...] = ()

    def __post_init__(self):
        losses = _frozen(self.losses)
        premiums = _frozen(self.premiums)
        object.__setattr__(self, 'losses', losses)
        object.__setattr__(self, 'premiums', premiums)

        if losses.ndim != 2 or losses.shape[0] < 1 or losses.shape[1] < 1:
            raise DataValidationError(
                "Losses must be a non-empty 2-D array", {'triangle_id': self.triangle_id}
            )
        n, m = losses.shape
        if premiums.shape != (n,):
            raise DataValidationError(
                "Premium vector length must equal the number of accident years",
                {'triangle_id': self.triangle_id, 'n_accident_years': n,
                 'n_premiums': premiums.size},
            )
        if not self.accident_years:
            object.__setattr__(self, 'accident_years', tuple(range(1, n + 1)))
        if not self.dev_lag_labels:
            object.__setattr__(self, 'dev_lag_labels', tuple(range(1, m + 1)))
        if len(self.accident_years) != n or len(self.dev_lag_labels) != m:
            raise DataValidationError(
                "Label lengths do not match the triangle shape", {'triangle_id': self.triangle_id}
            )

        bad_premium = np.flatnonzero(~(premiums > 0))
        if bad_premium.size:
            i = int(bad_premium[0])
            raise DataValidationError(
                "Premiums must be strictly positive",
                {'triangle_id': self.triangle_id, 'accident_year': self.accident_years[i],
                 'premium': premiums[i]},
            )

        observed = ~np.isnan(losses)
        bad = np.argwhere(observed & ~(np.where(observed, losses, 1.0) > 0))
        if bad.size:
            i, j = (int(v) for v in bad[0])
            raise DataValidationError(
                "Cumulative losses must be strictly positive",
                {'triangle_id': self.triangle_id, 'i': i + 1, 'j': j + 1, 'loss': losses[i, j]},
            )

        for i in range(n):
            row = observed[i]
            k = int(row.sum())
            if k == 0 or not row[:k].all():
                raise DataValidationError(
                    "Each accident year needs contiguous observed lags starting at lag 1",
                    {'triangle_id': self.triangle_id, 'i': i + 1},
                )

    @property
    def n_accident_years(self) -> int:
        return self.losses.shape[0]

    @property
    def n_dev_lags(self) -> int:
        return self.losses.shape[1]

    @property
    def observed(self) -> np.ndarray:
        """Boolean N x M mask of observed cells."""
        return ~np.isnan(self.losses)

    @property
    def last_observed_lag(self) -> np.ndarray:
        """1-based index of the latest observed lag per accident year."""
        return self.observed.sum(axis=1)

    @property
    def is_full_square(self) -> bool:
        return self.n_accident_years == self.n_dev_lags and bool(self.observed.all())

    @property
    def is_runoff(self) -> bool:
        n = self.n_accident_years
        i = np.arange(1, n + 1)[:, None]
        j = np.arange(1, self.n_dev_lags + 1)[None, :]
        return bool(np.array_equal(self.observed, j <= n - i + 1))

    def cell(self, i: int, j: int) -> float:
        """Loss at 1-based accident year i and lag j (NaN when unobserved)."""
        return float(self.losses[i - 1, j - 1])

    def cells(self) -> Iterator[Tuple[int, int, float]]:
        """Iterate observed cells as 1-based (i, j, loss)."""
        for i, j in np.argwhere(self.observed):
            yield int(i) + 1, int(j) + 1, float(self.losses[i, j])

    def with_premiums(self, premiums: Sequence[float]) -> 'Triangle':
        return replace(self, premiums=np.asarray(premiums, dtype=float))

    def scaled(self, factor: float) -> 'Triangle':
        """Divide every loss by ``factor`` (premiums untouched)."""
        return replace(self, losses=self.losses / factor)


@dataclass(frozen=True)
class LossRatioSeries:
    """Loss ratios r_ij = y_ij / p_i over the same index set as a Triangle."""
    triangle_id: str
    values: np.ndarray
    accident_years: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen(self.values))


def loss_ratios(t: Triangle) -> LossRatioSeries:
    """Elementwise r_ij = y_ij / p_i."""
    return LossRatioSeries(
        triangle_id=t.triangle_id,
        values=t.losses / t.premiums[:, None],
        accident_years=t.accident_years,
    )


def to_runoff(t: Triangle, as_of: int) -> Triangle:
    """
    Mask a triangle at a valuation diagonal.

    Keeps cells with i + j <= as_of + 1. Accident years with no cell on or
    before that diagonal are dropped, so ``as_of = N`` on an N x N square gives
    the standard run-off triangle.

    Args:
        t: Triangle to mask
        as_of: Diagonal index, 1 <= as_of <= M

    Returns:
        Run-off Triangle
    """
    m = t.n_dev_lags
    if not 1 <= as_of <= m:
        raise DataValidationError(
            "as_of must lie between 1 and the number of development lags",
            {'triangle_id': t.triangle_id, 'as_of': as_of, 'n_dev_lags': m},
        )
    n_keep = min(as_of, t.n_accident_years)
    i = np.arange(1, n_keep + 1)[:, None]
    j = np.arange(1, m + 1)[None, :]
    keep = (i + j) <= as_of + 1
    masked = np.where(keep, t.losses[:n_keep], np.nan)
    return replace(
        t,
        losses=masked,
        premiums=t.premiums[:n_keep],
        accident_years=t.accident_years[:n_keep],
    )


def load_triangles(path: Union[str, Path]) -> List[Triangle]:
    """
    Load triangles from a long CSV file (one row per cell).

    Args:
        path: CSV with columns triangle_id, line, accident_year, dev_lag,
            cumulative_loss, earned_premium

    Returns:
        One Triangle per distinct triangle_id, in order of first appearance
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"Triangle file not found: {path}")

    frame = pd.read_csv(path, encoding='utf-8', dtype={'triangle_id': str, 'line': str})
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataValidationError("Triangle file is missing columns", {'missing': missing})

    triangles = [
        _build_triangle(str(tid), group)
        for tid, group in frame.groupby('triangle_id', sort=False)
    ]
    logger.info(f"Loaded {len(triangles)} triangles from {path}")
    return triangles


def _build_triangle(triangle_id: str, group: pd.DataFrame) -> Triangle:
    for column in ('cumulative_loss', 'earned_premium'):
        bad = group[~(group[column] > 0)]
        if len(bad):
            row = bad.iloc[0]
            raise DataValidationError(
                f"Non-positive {column}",
                {'triangle_id': triangle_id, 'accident_year': int(row['accident_year']),
                 'dev_lag': int(row['dev_lag']), column: row[column]},
            )

    lines = group['line'].unique()
    if len(lines) != 1:
        raise DataValidationError(
            "Triangle rows disagree on line of business",
            {'triangle_id': triangle_id, 'lines': list(lines)},
        )

    duplicated = group.duplicated(subset=['accident_year', 'dev_lag'])
    if duplicated.any():
        row = group[duplicated].iloc[0]
        raise DataValidationError(
            "Duplicate cell",
            {'triangle_id': triangle_id, 'accident_year': int(row['accident_year']),
             'dev_lag': int(row['dev_lag'])},
        )

    premium_spread = group.groupby('accident_year')['earned_premium'].nunique()
    inconsistent = premium_spread[premium_spread > 1]
    if len(inconsistent):
        raise DataValidationError(
            "Inconsistent premium for the same accident year",
            {'triangle_id': triangle_id, 'accident_year': int(inconsistent.index[0])},
        )

    years = sorted(int(y) for y in group['accident_year'].unique())
    lags = sorted(int(j) for j in group['dev_lag'].unique())
    year_index: Dict[int, int] = {y: k for k, y in enumerate(years)}
    lag_index: Dict[int, int] = {j: k for k, j in enumerate(lags)}

    losses = np.full((len(years), len(lags)), np.nan)
    for row in group.itertuples(index=False):
        losses[year_index[int(row.accident_year)], lag_index[int(row.dev_lag)]] = float(
            row.cumulative_loss
        )
    premiums = (
        group.groupby('accident_year')['earned_premium'].first().reindex(years).to_numpy(float)
    )

    line = str(lines[0])
    if line not in KNOWN_LINES:
        logger.debug(f"Triangle {triangle_id} uses free-text line '{line}'")

    return Triangle(
        triangle_id=triangle_id,
        line=line,
        losses=losses,
        premiums=premiums,
        accident_years=tuple(years),
        dev_lag_labels=tuple(lags),
    )


def triangles_to_frame(triangles: Sequence[Triangle]) -> pd.DataFrame:
    """Long-format frame in the CSV schema."""
    records = []
    for t in triangles:
        for i, j, loss in t.cells():
            records.append({
                'triangle_id': t.triangle_id,
                'line': t.line,
                'accident_year': t.accident_years[i - 1],
                'dev_lag': t.dev_lag_labels[j - 1],
                'cumulative_loss': loss,
                'earned_premium': float(t.premiums[i - 1]),
            })
    return pd.DataFrame.from_records(records, columns=list(REQUIRED_COLUMNS))


def write_triangles(triangles: Sequence[Triangle], path: Union[str, Path]) -> Path:
    """Write triangles in the long-CSV schema with 15 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    triangles_to_frame(triangles).to_csv(path, index=False, float_format='%.15g')
    return path


def group_by_line(triangles: Sequence[Triangle]) -> Dict[str, List[Triangle]]:
    grouped: Dict[str, List[Triangle]] = {}
    for t in triangles:
        grouped.setdefault(t.line, []).append(t)
    return grouped


def find_triangle(triangles: Sequence[Triangle], triangle_id: str) -> Optional[Triangle]:
    return next((t for t in triangles if t.triangle_id == triangle_id), None)
