"""
Development Model Configuration
Body cutoff, tail window, ultimate horizon and prior scale, plus extraction of
the lag-to-lag cells each model is trained on.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src.data.triangle import Triangle
from src.utils.errors import ConfigError, DataValidationError

# Per-line defaults for (tau, rho)
LINE_DEFAULTS = {
    'PP': (4, (5, 10)),
    'CA': (4, (5, 10)),
    'WC': (6, (4, 10)),
    'OO': (6, (4, 10)),
}


@dataclass(frozen=True)
class DevConfig:
    """
    Settings shared by the chain-ladder body and the Bondy tail.

    ``sigma_scale`` multiplies the likelihood standard deviation at fit time
    only; values other than 1 deliberately misspecify the model.
    """
    tau: int = 4
    rho: Tuple[int, int] = (5, 10)
    j_max: Optional[int] = None
    prior_scale: float = 1.0
    loss_scale: float = 1.0
    sigma_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'rho', tuple(int(r) for r in self.rho))
        if self.tau < 2:
            raise ConfigError("tau must be >= 2", {'tau': self.tau})
        if len(self.rho) != 2 or not 2 <= self.rho[0] < self.rho[1]:
            raise ConfigError("rho must satisfy 2 <= rho1 < rho2", {'rho': self.rho})
        if self.prior_scale <= 0:
            raise ConfigError("prior_scale must be positive", {'prior_scale': self.prior_scale})
        if self.loss_scale <= 0 or self.sigma_scale <= 0:
            raise ConfigError("loss_scale and sigma_scale must be positive")
        if self.j_max is not None and self.j_max < 2:
            raise ConfigError("j_max must be >= 2", {'j_max': self.j_max})

    @classmethod
    def for_line(cls, line: str, **overrides) -> 'DevConfig':
        tau, rho = LINE_DEFAULTS.get(line, (4, (5, 10)))
        settings = {'tau': tau, 'rho': rho}
        settings.update(overrides)
        return cls(**settings)

    def validate_for(self, n_dev_lags: int) -> None:
        """Check the windows against a triangle with ``n_dev_lags`` lags."""
        if self.tau > n_dev_lags:
            raise ConfigError(
                "tau exceeds the number of development lags",
                {'tau': self.tau, 'n_dev_lags': n_dev_lags},
            )
        if self.rho[1] > n_dev_lags:
            raise ConfigError(
                "rho2 exceeds the number of development lags",
                {'rho': self.rho, 'n_dev_lags': n_dev_lags},
            )
        if self.j_max is not None and self.j_max < n_dev_lags:
            raise ConfigError(
                "j_max must not be below the last development lag",
                {'j_max': self.j_max, 'n_dev_lags': n_dev_lags},
            )

    def horizon(self, n_dev_lags: int) -> int:
        """Lag treated as ultimate; 4 * M unless configured."""
        return self.j_max if self.j_max is not None else 4 * n_dev_lags

    @property
    def tail_window(self) -> Tuple[int, int]:
        return max(2, self.rho[0]), self.rho[1]


@dataclass(frozen=True)
class DevelopmentCells:
    """Observed (y_ij, y_i,j-1) pairs for lags j in a window, on the model's loss scale."""
    i: np.ndarray
    j: np.ndarray
    log_y: np.ndarray
    log_y_prev: np.ndarray

    @property
    def size(self) -> int:
        return int(self.j.size)


def development_cells(t: Triangle, j_lo: int, j_hi: int, loss_scale: float = 1.0) -> DevelopmentCells:
    """
    Collect observed cells with ``j_lo <= j <= j_hi`` whose predecessor is observed.

    Raises:
        DataValidationError: if the window holds no observed cell
    """
    observed = t.observed
    rows, cols = [], []
    for j in range(max(2, j_lo), min(j_hi, t.n_dev_lags) + 1):
        hit = np.flatnonzero(observed[:, j - 1] & observed[:, j - 2])
        rows.extend(hit.tolist())
        cols.extend([j] * hit.size)
    if not rows:
        raise DataValidationError(
            "No observed cells in the training window",
            {'triangle_id': t.triangle_id, 'window': (j_lo, j_hi)},
        )
    i = np.asarray(rows)
    j = np.asarray(cols)
    losses = t.losses / loss_scale
    return DevelopmentCells(
        i=i + 1,
        j=j,
        log_y=np.log(losses[i, j - 1]),
        log_y_prev=np.log(losses[i, j - 2]),
    )
