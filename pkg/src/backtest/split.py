"""
Leave-Future-Out Split
Divides a full-square triangle into the run-off training region, the observed
first-row ultimate, in-sample test ultimates and the validation ultimate.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from src.data.triangle import Triangle, to_runoff
from src.utils.errors import DataValidationError


@dataclass(frozen=True)
class BacktestSplit:
    """
    Roles of the cells of one N x N triangle.

    The ultimate of accident year i is taken as y_(i,M).
    """
    full: Triangle
    train: Triangle
    test_rows: Tuple[int, ...]
    validation_row: int

    @property
    def triangle_id(self) -> str:
        return self.full.triangle_id

    @property
    def n(self) -> int:
        return self.full.n_accident_years

    @property
    def train_mask(self) -> np.ndarray:
        return self.train.observed

    @property
    def observed_ultimate(self) -> float:
        return self.full.cell(1, self.n)

    @property
    def observed_loss_ratio(self) -> float:
        return self.observed_ultimate / float(self.full.premiums[0])

    def ultimate(self, i: int) -> float:
        return self.full.cell(i, self.n)

    def loss_ratio(self, i: int) -> float:
        return self.ultimate(i) / float(self.full.premiums[i - 1])

    @property
    def test_targets(self) -> Dict[int, float]:
        return {i: self.ultimate(i) for i in self.test_rows}

    @property
    def validation_target(self) -> float:
        return self.ultimate(self.validation_row)

    def target_cells(self) -> Dict[str, set]:
        m = self.n
        return {
            'train': {(i + 1, j + 1) for i, j in np.argwhere(self.train_mask)},
            'observed': {(1, m)},
            'test': {(i, m) for i in self.test_rows},
            'validation': {(self.validation_row, m)},
        }


def make_split(t: Triangle, test_rows: Optional[Sequence[int]] = None) -> BacktestSplit:
    """
    Build the backtest split of a full square.

    Args:
        t: Full-square triangle with N = M >= 3
        test_rows: In-sample accident years scored as test (default 2..N-1)

    Returns:
        BacktestSplit
    """
    n, m = t.n_accident_years, t.n_dev_lags
    if not t.is_full_square:
        raise DataValidationError(
            "Backtests need a fully observed square triangle",
            {'triangle_id': t.triangle_id, 'shape': (n, m)},
        )
    if n < 3:
        raise DataValidationError("Backtests need at least 3 accident years", {'triangle_id': t.triangle_id})

    allowed = tuple(range(2, n))
    rows = allowed if test_rows is None else tuple(sorted(set(int(i) for i in test_rows)))
    if not set(rows) <= set(allowed):
        raise DataValidationError(
            "Test rows must lie between 2 and N-1",
            {'triangle_id': t.triangle_id, 'test_rows': rows, 'n': n},
        )
    return BacktestSplit(full=t, train=to_runoff(t, n), test_rows=rows, validation_row=n)
