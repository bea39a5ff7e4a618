"""
Backtest Pipeline
Exact leave-future-out backtest of the forecasting models over a corpus of
full-square triangles, grouped by line of business.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.data.triangle import Triangle, group_by_line
from src.inference.draws import DrawMatrix
from src.inference.sampler import SamplerConfig
from src.models.development.config import DevConfig
from src.models.development.fit import fit_development, resolve_loss_scale
from src.models.development.simulation import UltimateSummary, simulate_development
from src.models.forecasting.forecast import PredictiveDistribution, predictive_distribution
from src.models.forecasting.hierarchical import (
    HierarchicalConfig,
    ProgramData,
    fit_hierarchical,
    program_draws,
)
from src.models.forecasting.measurement import MeasurementErrorInput
from src.models.forecasting.state_space import ModelKind
from src.backtest.metrics import (
    Comparison,
    ScoreTable,
    calibration_histogram,
    elpd_and_diff,
    lpd,
    percentile,
    rmse,
)
from src.backtest.split import BacktestSplit, make_split
from src.utils.errors import ConfigError, DataValidationError, LossflowError
from src.utils.parallel import derive_seed, run_jobs
from src.validation.sbc import uniform_band

logger = logging.getLogger(__name__)


@dataclass
class BacktestConfig:
    """
    Settings of one backtest run.

    ``line_settings`` overrides the development defaults per line, e.g.
    ``{'WC': {'tau': 6, 'rho': (4, 10)}}``. ``prior_mean``/``prior_sd`` fix
    E[r] and SD[r]; left unset they are taken from the first-row ultimates of
    each line.
    """
    models: Tuple[ModelKind, ...] = (ModelKind.RANDOM_WALK, ModelKind.MEAN_REVERSION)
    line_settings: Dict[str, dict] = field(default_factory=dict)
    prior_scale: float = 1.0
    loss_scale: Union[float, str] = 'auto'
    measurement_error: bool = True
    prior_mean: Optional[float] = None
    prior_sd: Optional[float] = None
    test_rows: Optional[Sequence[int]] = None
    failure_threshold: float = 0.25
    archive_draws: int = 400
    seed: int = 0
    workers: int = 1
    dev_sampler: SamplerConfig = field(default_factory=SamplerConfig)
    forecast_sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        self.models = tuple(ModelKind(k) for k in self.models)
        if not self.models:
            raise DataValidationError("At least one forecasting model is required")
        if not 0 <= self.failure_threshold < 1:
            raise DataValidationError("failure_threshold must lie in [0, 1)",
                                      {'failure_threshold': self.failure_threshold})

    def dev_config(self, line: str, n_dev_lags: int, loss_scale: float) -> DevConfig:
        settings = {**self.line_settings.get(line, {}), 'j_max': n_dev_lags,
                    'prior_scale': self.prior_scale, 'loss_scale': loss_scale}
        cfg = DevConfig.for_line(line, **settings)
        cfg.validate_for(n_dev_lags)
        return cfg


@dataclass
class _DevOutcome:
    triangle_id: str
    summary: Optional[UltimateSummary] = None
    convergence: Optional[dict] = None
    error: Optional[str] = None


def _develop_job(train: Triangle, cfg: DevConfig, sampler_cfg: SamplerConfig) -> _DevOutcome:
    try:
        fit = fit_development(train, cfg, sampler_cfg)
        summary = simulate_development(fit.body, fit.tail, train, cfg,
                                       np.random.default_rng(sampler_cfg.seed))
        return _DevOutcome(train.triangle_id, summary, fit.convergence_row())
    except LossflowError as e:
        return _DevOutcome(train.triangle_id, error=str(e))


def _forecast_job(programs: List[ProgramData], kind: ModelKind, hcfg: HierarchicalConfig,
                  sampler_cfg: SamplerConfig) -> DrawMatrix:
    return fit_hierarchical(programs, kind, hcfg, sampler_cfg)


def calibration_summary(scores: ScoreTable, model: str, split: str = 'validation',
                        bins: int = 20, level: float = 0.99) -> dict:
    """Histogram of predictive percentiles against the uniform band."""
    values = scores.select(model, split)['percentile'].to_numpy(dtype=float)
    counts = calibration_histogram(values, bins)
    result = {'model': model, 'split': split, 'n': int(values.size), 'counts': counts.tolist(),
              'band': None, 'violations': None}
    if values.size >= bins:
        lo, hi = uniform_band(values.size, bins, level)
        result.update(band=[lo, hi], violations=int(np.sum((counts < lo) | (counts > hi))))
    return result


@dataclass
class BacktestResult:
    """Scores, archives and bookkeeping of a backtest run."""
    scores: ScoreTable
    summaries: Dict[str, UltimateSummary] = field(default_factory=dict)
    convergence: List[dict] = field(default_factory=list)
    hierarchical: Dict[Tuple[str, str], DrawMatrix] = field(default_factory=dict)
    predictive: Dict[Tuple[str, str, str], np.ndarray] = field(default_factory=dict)
    premiums: Dict[str, np.ndarray] = field(default_factory=dict)
    failures: List[dict] = field(default_factory=list)
    aborted_lines: Dict[str, str] = field(default_factory=dict)

    @property
    def models(self) -> List[str]:
        return self.scores.models

    def comparisons(self, split: str = 'validation') -> List[Comparison]:
        """Pairwise comparisons per line and pooled over all lines."""
        out = []
        for a, b in combinations(self.models, 2):
            for line in self.scores.lines + [None]:
                out.append(elpd_and_diff(self.scores, a, b, split, line))
        return out

    def calibration(self, model: str, split: str = 'validation', bins: int = 20,
                    level: float = 0.99) -> dict:
        return calibration_summary(self.scores, model, split, bins, level)

    def predictive_frame(self) -> pd.DataFrame:
        frames = []
        for (line, triangle_id, model), ratios in self.predictive.items():
            s, k = ratios.shape
            years = np.arange(1, k + 1)
            frames.append(pd.DataFrame({
                'line': line,
                'triangle_id': triangle_id,
                'model': model,
                'accident_year': np.tile(years, s),
                'draw': np.repeat(np.arange(s), k),
                'loss_ratio': ratios.ravel(),
                'premium': np.tile(self.premiums[triangle_id], s),
            }))
        if not frames:
            return pd.DataFrame(columns=['line', 'triangle_id', 'model', 'accident_year',
                                         'draw', 'loss_ratio', 'premium'])
        return pd.concat(frames, ignore_index=True)

    def write(self, output_dir: Union[str, Path]) -> List[Path]:
        """Write every table and archive; returns the paths written."""
        out = Path(output_dir)
        (out / 'draws').mkdir(parents=True, exist_ok=True)
        written = [self.scores.to_csv(out / 'scores.csv')]

        comparisons = out / 'comparisons.json'
        comparisons.write_text(json.dumps({
            'validation': [c.to_dict() for c in self.comparisons('validation')],
            'test': [c.to_dict() for c in self.comparisons('test')],
            'calibration': [self.calibration(m) for m in self.models],
            'aborted_lines': self.aborted_lines,
        }, indent=2, default=_json_default))
        written.append(comparisons)

        for name, rows in (('failures.csv', self.failures), ('convergence.csv', self.convergence)):
            path = out / name
            pd.DataFrame(rows).to_csv(path, index=False, float_format='%.17g')
            written.append(path)

        if self.summaries:
            path = out / 'ultimates.csv'
            pd.concat([s.to_frame() for s in self.summaries.values()], ignore_index=True).to_csv(
                path, index=False, float_format='%.17g')
            written.append(path)

        path = out / 'predictive_draws.csv'
        self.predictive_frame().to_csv(path, index=False, float_format='%.17g')
        written.append(path)

        for (line, model), draws in self.hierarchical.items():
            written.extend(draws.to_csv(out / 'draws' / f'{line}_{model}.csv'))
        logger.info(f"Backtest outputs written to {out}")
        return written


def read_predictive_draws(path: Union[str, Path]) -> Tuple[Dict[Tuple[str, str, str], np.ndarray], Dict[str, np.ndarray]]:
    """Load ``predictive_draws.csv`` back into draw arrays and premium vectors."""
    frame = pd.read_csv(path, dtype={'line': str, 'triangle_id': str, 'model': str})
    predictive, premiums = {}, {}
    for (line, triangle_id, model), group in frame.groupby(['line', 'triangle_id', 'model'], sort=False):
        pivot = group.pivot(index='draw', columns='accident_year', values='loss_ratio').sort_index(axis=1)
        predictive[(line, triangle_id, model)] = pivot.to_numpy(dtype=float)
        first = group[group['draw'] == group['draw'].min()].sort_values('accident_year')
        premiums[triangle_id] = first['premium'].to_numpy(dtype=float)
    return predictive, premiums


def _json_default(value):
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    raise TypeError(f"Not JSON serializable: {type(value)}")


def score_program(
    split: BacktestSplit,
    pred: PredictiveDistribution,
    model: str,
    scores: ScoreTable,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Score the test and validation ultimates of one triangle under one model.

    LPD uses the lognormal density on the loss-ratio scale; RMSE and the
    percentile use sampled losses. Returns the sampled S x N loss ratios.
    """
    ratios = pred.sample(rng)
    premiums = split.full.premiums
    targets = [('test', i) for i in split.test_rows] + [('validation', split.validation_row)]
    for role, i in targets:
        k = i - 1
        losses = ratios[:, k] * premiums[k]
        truth = split.ultimate(i)
        scores.add(
            split.full.line, split.triangle_id, model, role, split.full.accident_years[k], truth,
            lpd(pred.log_density(split.loss_ratio(i), k)), rmse(truth, losses), percentile(truth, losses),
        )
    return ratios


def _measurement_prior(splits: Sequence[BacktestSplit], cfg: BacktestConfig) -> Tuple[float, float]:
    if cfg.prior_mean is not None and cfg.prior_sd is not None:
        return cfg.prior_mean, cfg.prior_sd
    observed = np.array([s.observed_loss_ratio for s in splits])
    return float(observed.mean()), float(observed.std(ddof=1))


def run_backtest(corpus: Sequence[Triangle], cfg: Optional[BacktestConfig] = None) -> BacktestResult:
    """
    Run the backtest over every line in the corpus.

    Per line: split each triangle, fit the development models to the run-off
    region, feed developed ultimates of years 1..N-1 to the hierarchical
    forecasters, and score in-sample test years and the one-step-ahead
    validation year.

    Args:
        corpus: Full-square triangles
        cfg: Backtest settings

    Returns:
        BacktestResult
    """
    cfg = cfg or BacktestConfig()
    lines = group_by_line(corpus)
    small = {line: len(ts) for line, ts in lines.items() if len(ts) < 2}
    if small:
        raise DataValidationError("Hierarchical backtests need at least 2 triangles per line", small)

    result = BacktestResult(scores=ScoreTable())
    for line_idx, (line, triangles) in enumerate(lines.items()):
        try:
            _run_line(line, line_idx, triangles, cfg, result)
        except (DataValidationError, ConfigError):
            raise
        except LossflowError as e:
            logger.error(f"Line {line} aborted: {e}")
            result.aborted_lines[line] = str(e)
    logger.info(f"Backtest finished: {len(result.scores)} scores, {len(result.failures)} triangle failures, "
                f"{len(result.aborted_lines)} aborted lines")
    return result


def _run_line(line: str, line_idx: int, triangles: Sequence[Triangle], cfg: BacktestConfig,
              result: BacktestResult) -> None:
    splits = [make_split(t, cfg.test_rows) for t in triangles]

    jobs = []
    for g, split in enumerate(splits, start=1):
        dev_cfg = cfg.dev_config(line, split.n, resolve_loss_scale(split.train, cfg.loss_scale))
        jobs.append((split.train, dev_cfg, replace(cfg.dev_sampler, seed=derive_seed(cfg.seed, line_idx, g))))
    logger.info(f"Line {line}: developing {len(jobs)} triangles")
    outcomes: List[_DevOutcome] = run_jobs(_develop_job, jobs, cfg.workers)

    kept = []
    for split, outcome in zip(splits, outcomes):
        if outcome.error is not None:
            logger.error(f"{outcome.triangle_id}: development failed: {outcome.error}")
            result.failures.append({'line': line, 'triangle_id': outcome.triangle_id,
                                    'stage': 'development', 'error': outcome.error})
            continue
        result.summaries[outcome.triangle_id] = outcome.summary
        result.convergence.append({'line': line, **outcome.convergence})
        kept.append((split, outcome.summary))

    failed = len(splits) - len(kept)
    if failed > cfg.failure_threshold * len(splits):
        raise LossflowError(f"{failed} of {len(splits)} triangles failed development",
                            {'line': line, 'failed': failed})
    if len(kept) < 2:
        raise LossflowError("Fewer than 2 developed triangles remain", {'line': line})

    prior_mean, prior_sd = _measurement_prior([s for s, _ in kept], cfg)
    logger.info(f"Line {line}: measurement prior E[r]={prior_mean:.4f}, SD[r]={prior_sd:.4f}")
    programs = []
    for split, summary in kept:
        n_in = split.n - 1
        programs.append(ProgramData(
            triangle_id=split.triangle_id,
            me=MeasurementErrorInput(mean=summary.mean[:n_in], sd=summary.sd[:n_in],
                                     prior_mean=prior_mean, prior_sd=prior_sd),
            premiums=split.full.premiums[:n_in],
        ))

    hcfg = HierarchicalConfig(group=line, prior_scale=cfg.prior_scale,
                              measurement_error=cfg.measurement_error)
    fits = run_jobs(_forecast_job, [
        (programs, kind, hcfg, replace(cfg.forecast_sampler, seed=derive_seed(cfg.seed, line_idx, 0, k)))
        for k, kind in enumerate(cfg.models, start=1)
    ], cfg.workers)

    for k, (kind, hier) in enumerate(zip(cfg.models, fits), start=1):
        result.hierarchical[(line, kind.value)] = hier
        for g, (split, _) in enumerate(kept, start=1):
            n_in = split.n - 1
            pred = predictive_distribution(
                program_draws(hier, g), kind, split.full.premiums[:n_in], horizon=1,
                premiums_future=split.full.premiums[n_in:],
            )
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, line_idx, g, k]))
            ratios = score_program(split, pred, kind.value, result.scores, rng)
            result.predictive[(line, split.triangle_id, kind.value)] = ratios[:cfg.archive_draws]
            result.premiums[split.triangle_id] = split.full.premiums
