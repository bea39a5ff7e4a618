"""
Model Stacking
Single-weight maximum-likelihood stacking of predictive distributions over
the test split, blending of predictive draws, and stacked scoring.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from src.backtest.metrics import ScoreTable, percentile, rmse
from src.utils.errors import DataValidationError

logger = logging.getLogger(__name__)


@dataclass
class StackInput:
    """
    Per-datapoint, per-model LPD values from the test split.

    Rows where every model underflows to -inf are dropped and reported in
    ``dropped``; a -inf entry elsewhere means that model gives the point zero
    density.
    """
    lpd: np.ndarray
    models: List[str]
    datapoints: List[str] = field(default_factory=list)
    dropped: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.lpd = np.atleast_2d(np.asarray(self.lpd, dtype=float))
        self.models = list(self.models)
        if not self.datapoints:
            self.datapoints = [str(i) for i in range(self.lpd.shape[0])]
        if self.lpd.shape != (len(self.datapoints), len(self.models)):
            raise DataValidationError(
                "LPD matrix shape does not match datapoints x models",
                {'shape': self.lpd.shape, 'datapoints': len(self.datapoints), 'models': len(self.models)},
            )
        if len(self.models) < 2:
            raise DataValidationError("Stacking needs at least 2 models", {'models': self.models})
        if np.any(np.isnan(self.lpd)) or np.any(np.isposinf(self.lpd)):
            raise DataValidationError("LPD matrix contains NaN or +inf")

        empty = np.all(np.isneginf(self.lpd), axis=1)
        if empty.any():
            self.dropped += [d for d, e in zip(self.datapoints, empty) if e]
            logger.warning(f"Dropping {int(empty.sum())} datapoints where every model underflows")
            self.lpd = self.lpd[~empty]
            self.datapoints = [d for d, e in zip(self.datapoints, empty) if not e]
        if self.lpd.shape[0] < 1:
            raise DataValidationError("Stacking needs at least one datapoint")

    @classmethod
    def from_scores(cls, scores: ScoreTable, models: Optional[Sequence[str]] = None,
                    line: Optional[str] = None) -> 'StackInput':
        """Test-split LPD matrix from a score table; validation rows are never read."""
        models = list(models) if models is not None else scores.models
        matrix = scores.lpd_matrix(models, split='test', line=line)
        if matrix.isna().any().any():
            raise DataValidationError("Models were scored on different test targets", {'models': models})
        ids = [f'{l}/{t}/{a}' for l, t, a in matrix.index]
        return cls(lpd=matrix.to_numpy(dtype=float), models=models, datapoints=ids)


@dataclass
class StackWeights:
    """Simplex weights per model plus optimizer bookkeeping."""
    weights: Dict[str, float]
    objective: float = math.nan
    iterations: int = 0
    converged: bool = True
    history: List[float] = field(default_factory=list, repr=False)

    @property
    def models(self) -> List[str]:
        return list(self.weights)

    def vector(self, models: Optional[Sequence[str]] = None) -> np.ndarray:
        models = list(models) if models is not None else self.models
        missing = [m for m in models if m not in self.weights]
        if missing:
            raise DataValidationError("No weight for models", {'missing': missing})
        return np.array([self.weights[m] for m in models])

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.weights, indent=2))
        return path

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> 'StackWeights':
        return cls(weights={k: float(v) for k, v in json.loads(Path(path).read_text()).items()})


def stack_objective(log_dens: np.ndarray, w: np.ndarray) -> float:
    """sum_g log sum_k w_k exp(LPD_gk)."""
    with np.errstate(divide='ignore'):
        log_w = np.log(w)
    return float(np.sum(logsumexp(log_dens + log_w[None, :], axis=1)))


def fit_stack(data: StackInput, tol: float = 1e-10, max_iter: int = 10000) -> StackWeights:
    """
    Maximize the stacking objective over the simplex.

    Multiplicative EM updates w_k <- mean_g(w_k p_gk / sum_j w_j p_gj) from
    the uniform start; each update does not decrease the objective. Stops
    when the gain falls below ``tol``; otherwise the best iterate is returned
    with ``converged=False``.
    """
    log_dens = data.lpd
    k = log_dens.shape[1]
    w = np.full(k, 1.0 / k)
    current = stack_objective(log_dens, w)
    history = [current]
    converged = False

    iteration = 0
    for iteration in range(1, max_iter + 1):
        with np.errstate(divide='ignore'):
            joint = log_dens + np.log(w)[None, :]
        resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
        w = resp.mean(axis=0)
        w /= w.sum()
        value = stack_objective(log_dens, w)
        history.append(value)
        gain = value - current
        current = value
        if gain < tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Stacking did not converge within {max_iter} iterations")
    weights = dict(zip(data.models, (float(x) for x in w)))
    logger.info(f"Stacking weights: {weights} (objective {current:.6f}, {iteration} iterations)")
    return StackWeights(weights=weights, objective=current, iterations=iteration,
                        converged=converged, history=history)


def stacked_lpd(weights: StackWeights, lpd_row: Dict[str, float]) -> float:
    """log sum_k w_k exp(LPD_k) at one datapoint."""
    models = weights.models
    w = weights.vector(models)
    values = np.array([lpd_row[m] for m in models], dtype=float)
    keep = w > 0
    if not np.any(keep & ~np.isneginf(values)):
        return -math.inf
    return float(logsumexp(values[keep] + np.log(w[keep])))


def blend(weights: StackWeights, draws: Dict[str, np.ndarray], rng: np.random.Generator,
          n_draws: Optional[int] = None) -> np.ndarray:
    """
    Mixture draws: each picks model k with probability w_k, then a uniform
    draw (row) of that model's predictive draws.

    Args:
        weights: Stacking weights
        draws: Per-model draw arrays with draws along axis 0
        rng: Random generator
        n_draws: Number of blended draws (defaults to the common draw count)
    """
    if set(draws) != set(weights.models):
        raise DataValidationError(
            "Blend draws and weights name different models",
            {'weights': weights.models, 'draws': sorted(draws)},
        )
    models = weights.models
    counts = {m: np.shape(draws[m])[0] for m in models}
    n_draws = n_draws or min(counts.values())
    choice = rng.choice(len(models), size=n_draws, p=weights.vector(models))

    shape = np.shape(draws[models[0]])[1:]
    out = np.empty((n_draws,) + tuple(shape))
    for k, m in enumerate(models):
        picked = np.flatnonzero(choice == k)
        if picked.size:
            rows = rng.integers(0, counts[m], size=picked.size)
            out[picked] = np.asarray(draws[m])[rows]
    return out


def stack_scores(
    scores: ScoreTable,
    weights: StackWeights,
    predictive: Dict[tuple, np.ndarray],
    premiums: Dict[str, np.ndarray],
    rng: np.random.Generator,
    name: str = 'stacked',
    line: Optional[str] = None,
) -> ScoreTable:
    """
    Score the stacked model on the validation split next to the candidates.

    LPD is the mixture density of the candidate LPDs; RMSE and percentile use
    blended loss draws.

    Args:
        scores: Candidate scores (validation rows are read)
        weights: Weights fitted on the test split
        predictive: (line, triangle_id, model) -> S x N loss-ratio draws
        premiums: triangle_id -> premiums
        rng: Random generator
        name: Model label for the stacked rows
        line: Restrict to one line
    """
    models = weights.models
    validation = scores.select(split='validation', line=line)
    out = ScoreTable(scores.frame.copy())
    for (ln, triangle_id, year), group in validation.groupby(['line', 'triangle_id', 'accident_year'], sort=False):
        row = group.set_index('model')['lpd']
        if not set(models) <= set(row.index):
            raise DataValidationError("Validation scores missing for some models",
                                      {'triangle_id': triangle_id, 'models': models})
        missing = [m for m in models if (ln, triangle_id, m) not in predictive]
        if missing:
            raise DataValidationError("Predictive draws missing", {'triangle_id': triangle_id, 'models': missing})
        mixture = stacked_lpd(weights, row.to_dict())
        blended = blend(weights, {m: predictive[(ln, triangle_id, m)] for m in models}, rng)
        # the validation year is the last column
        k = blended.shape[1] - 1
        losses = blended[:, k] * premiums[triangle_id][k]
        truth = float(group['ultimate'].iloc[0])
        out.add(ln, triangle_id, name, 'validation', year, truth, mixture,
                rmse(truth, losses), percentile(truth, losses))
    logger.info(f"Scored stacked model on {validation[['triangle_id']].drop_duplicates().shape[0]} triangles")
    return out


def stacked_objective_table(data: StackInput, weights: StackWeights) -> pd.DataFrame:
    """Fitted objective next to every single model and uniform weights."""
    k = len(data.models)
    rows = [{'candidate': 'stacked', 'objective': stack_objective(data.lpd, weights.vector(data.models))},
            {'candidate': 'uniform', 'objective': stack_objective(data.lpd, np.full(k, 1.0 / k))}]
    for i, m in enumerate(data.models):
        rows.append({'candidate': m, 'objective': float(np.sum(data.lpd[:, i]))})
    return pd.DataFrame(rows)
