"""
Lossflow Workflow Engine
Orchestrates the reserving workflow commands: development, forecasting,
calibration, backtesting, stacking and cashflows. Every command writes its
outputs plus a run manifest into its own directory.
"""

import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.backtest.metrics import ScoreTable, elpd_and_diff
from src.backtest.pipeline import BacktestConfig, calibration_summary, read_predictive_draws, run_backtest
from src.cashflow.walkback import cashflow_summary, walkback
from src.data.triangle import Triangle, group_by_line, load_triangles
from src.inference.draws import DrawMatrix
from src.inference.sampler import SamplerConfig
from src.models.development import bondy, chain_ladder
from src.models.development.config import DevConfig
from src.models.development.fit import DevelopmentFit, develop_triangle, resolve_loss_scale
from src.models.development.simulation import (
    UltimateSummary,
    development_factors,
    read_ultimate_summaries,
)
from src.models.forecasting.forecast import ForecastDraws, fit_forecast, forecast, read_forecast_draws
from src.models.forecasting.hierarchical import (
    HierarchicalConfig,
    ProgramData,
    fit_hierarchical,
    program_draws,
)
from src.models.forecasting.measurement import MeasurementErrorInput
from src.models.forecasting.priors import derive_priors
from src.models.forecasting.state_space import ForecastPriors, ModelKind
from src.reporting.generators.report_generator import ReportGenerator, render_backtest_report
from src.stacking.stacker import StackInput, blend, fit_stack, stack_scores, stacked_objective_table
from src.utils.config_manager import ConfigManager, RunConfig
from src.utils.errors import DependencyMissingError, LossflowError
from src.utils.logger import setup_logger
from src.utils.manifest import write_manifest
from src.utils.parallel import derive_seed, run_jobs
from src.validation.predictive import CheckMode, predictive_check
from src.validation.sbc import SbcConfig, SbcFamily, run_sbc

# stable integer keys for seed derivation
_COMMAND_KEYS = {'develop': 1, 'forecast': 2, 'sbc': 3, 'backtest': 4, 'stack': 5, 'cashflow': 6}


@dataclass
class CommandResult:
    """Outcome of one workflow command."""
    command: str
    output_dir: Path
    files: List[Path] = field(default_factory=list)
    failures: List[Dict[str, Any]] = field(default_factory=list)
    started: datetime = field(default_factory=datetime.now)
    finished: Optional[datetime] = None

    @property
    def status(self) -> str:
        return 'partial' if self.failures else 'completed'


@dataclass
class _DevelopOutcome:
    triangle_id: str
    fit: Optional[DevelopmentFit] = None
    summary: Optional[UltimateSummary] = None
    error: Optional[str] = None


def _develop_job(t: Triangle, cfg: DevConfig, sampler_cfg: SamplerConfig) -> _DevelopOutcome:
    try:
        fit, summary = develop_triangle(t, cfg, sampler_cfg)
        return _DevelopOutcome(t.triangle_id, fit=fit, summary=summary)
    except LossflowError as e:
        return _DevelopOutcome(t.triangle_id, error=str(e))


def resolved_prior_sds(prior_scale: float) -> Dict[str, Dict[str, float]]:
    """Prior SDs of every model after applying the prior scale."""
    return {
        'chain_ladder': {name: scale * prior_scale for name, (_, scale) in chain_ladder.PRIORS.items()},
        'bondy': {name: scale * prior_scale for name, (_, scale) in bondy.PRIORS.items()},
        'forecast': {name: scale for name, (_, scale) in ForecastPriors().scaled(prior_scale).as_dict().items()},
    }


class LossflowEngine:
    """
    Runs workflow commands against one merged configuration.

    Outputs live under ``paths.output_dir/<command>/``.
    """

    def __init__(self, manager: Optional[ConfigManager] = None,
                 config_path: Optional[Union[str, Path]] = None):
        self.logger = setup_logger(__name__)
        self.manager = manager or ConfigManager(config_path)
        self.logger.info(f"Lossflow engine ready (config hash {self.manager.config_hash()[:12]})")

    @property
    def config(self) -> RunConfig:
        return self.manager.config

    def output_dir(self, command: str) -> Path:
        path = Path(self.config.paths.output_dir) / command
        path.mkdir(parents=True, exist_ok=True)
        return path

    def sampler(self, command: str, *keys: int) -> SamplerConfig:
        seed = derive_seed(self.config.seed, _COMMAND_KEYS[command], *keys)
        return self.config.sampler.to_sampler(seed, self.config.workers)

    def dev_config(self, t: Triangle, j_max: Optional[int] = None) -> DevConfig:
        settings = self.config.line_settings(t.line)
        if j_max is not None:
            settings['j_max'] = j_max
        cfg = DevConfig.for_line(
            t.line, prior_scale=self.config.prior_scale,
            loss_scale=resolve_loss_scale(t, self.config.loss_scale), **settings,
        )
        cfg.validate_for(t.n_dev_lags)
        return cfg

    def _require(self, *paths: Path) -> None:
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise DependencyMissingError("Upstream outputs are missing; run the earlier command first",
                                         {'missing': missing})

    def _finish(self, result: CommandResult, extra: Optional[Dict[str, Any]] = None) -> CommandResult:
        result.finished = datetime.now()
        manifest = write_manifest(
            result.output_dir, result.command, self.manager.to_dict(), self.manager.config_hash(),
            self.config.seed, result.files,
            extra={'failures': result.failures, **(extra or {})},
        )
        result.files.append(manifest)
        elapsed = (result.finished - result.started).total_seconds()
        self.logger.info(f"{result.command} {result.status} in {elapsed:.1f}s -> {result.output_dir}")
        return result

    def _load_corpus(self) -> List[Triangle]:
        return load_triangles(self.config.paths.corpus)

    # development

    def develop(self) -> CommandResult:
        """Fit body and tail models per triangle and simulate ultimates."""
        out = self.output_dir('develop')
        result = CommandResult('develop', out)
        triangles = self._load_corpus()
        jobs = [(t, self.dev_config(t), self.sampler('develop', idx))
                for idx, t in enumerate(triangles, start=1)]
        self.logger.info(f"Developing {len(jobs)} triangles with {self.config.workers} workers")
        outcomes: List[_DevelopOutcome] = run_jobs(_develop_job, jobs, self.config.workers)

        summaries, convergence, coverage = [], [], []
        for idx, (t, outcome, job) in enumerate(zip(triangles, outcomes, jobs), start=1):
            if outcome.error is not None:
                self.logger.error(f"{t.triangle_id}: development failed: {outcome.error}")
                result.failures.append({'triangle_id': t.triangle_id, 'line': t.line, 'error': outcome.error})
                continue
            summaries.append(outcome.summary)
            convergence.append({'line': t.line, **outcome.fit.convergence_row()})
            result.files.extend(outcome.fit.body.to_csv(out / 'draws' / f'{t.triangle_id}_body.csv'))
            result.files.extend(outcome.fit.tail.to_csv(out / 'draws' / f'{t.triangle_id}_tail.csv'))
            coverage.extend(self._predictive_checks(t, job[1], outcome.fit, idx, out, result))
        if not summaries:
            raise LossflowError("Every triangle failed development", {'failures': len(result.failures)})

        result.files.append(self._write_csv(
            pd.concat([s.to_frame() for s in summaries], ignore_index=True), out / 'ultimates.csv'))
        result.files.append(self._write_csv(
            pd.concat([s.draws_frame() for s in summaries], ignore_index=True), out / 'ultimate_draws.csv'))
        result.files.append(self._write_csv(pd.DataFrame(convergence), out / 'convergence.csv'))
        result.files.append(self._write_csv(pd.DataFrame(coverage), out / 'checks' / 'coverage.csv'))
        result.files.append(self._write_csv(pd.DataFrame(result.failures), out / 'failures.csv'))
        return self._finish(result, {'prior_sds': resolved_prior_sds(self.config.prior_scale)})

    def _predictive_checks(self, t: Triangle, cfg: DevConfig, fit: DevelopmentFit, idx: int,
                           out: Path, result: CommandResult) -> List[Dict[str, Any]]:
        """Prior and posterior predictive overlays plus interval coverage for one triangle."""
        rows = []
        for mode in CheckMode:
            rng = np.random.default_rng(derive_seed(self.config.seed, _COMMAND_KEYS['develop'], idx, 0,
                                                    1 if mode is CheckMode.PRIOR else 2))
            check = predictive_check(t, cfg, rng, mode=mode, body=fit.body, tail=fit.tail)
            result.files.extend(check.to_csv(out / 'checks', prefix=f'{t.triangle_id}_'))
            rows.extend({'triangle_id': t.triangle_id, 'mode': mode.value, 'level': level, 'coverage': value}
                        for level, value in check.coverage.items())
        return rows

    # forecasting

    def _measurement_prior(self, summaries: List[UltimateSummary]) -> Tuple[Optional[float], Optional[float]]:
        settings = self.config.measurement_prior
        if settings.source == 'explicit':
            return settings.mean, settings.sd
        if len(summaries) < 2:
            return None, None
        # first accident year is the most developed
        first = np.array([s.mean[0] for s in summaries])
        return float(first.mean()), float(first.std(ddof=1))

    def _future_premiums(self, horizon: int) -> Dict[str, np.ndarray]:
        path = self.config.paths.premiums_future
        if path is None:
            return {}
        self._require(Path(path))
        frame = pd.read_csv(path, dtype={'triangle_id': str})
        out = {}
        for triangle_id, group in frame.groupby('triangle_id', sort=False):
            values = group.sort_values('accident_year')['earned_premium'].to_numpy(dtype=float)
            out[str(triangle_id)] = values[:horizon]
        return out

    def forecast(self) -> CommandResult:
        """Forecast future accident years from the developed ultimates."""
        develop_dir = Path(self.config.paths.output_dir) / 'develop'
        self._require(develop_dir / 'ultimates.csv')
        out = self.output_dir('forecast')
        result = CommandResult('forecast', out)
        settings = self.config.forecast

        summaries = read_ultimate_summaries(develop_dir / 'ultimates.csv')
        triangles = [t for t in self._load_corpus() if t.triangle_id in summaries]
        future = self._future_premiums(settings.horizon)
        kinds = [ModelKind(m) for m in settings.models]

        archives: Dict[str, List[ForecastDraws]] = {k.value: [] for k in kinds}
        priors_used = {}
        for line_idx, (line, members) in enumerate(group_by_line(triangles).items(), start=1):
            line_summaries = [summaries[t.triangle_id] for t in members]
            prior_mean, prior_sd = self._measurement_prior(line_summaries)
            priors_used[line] = {'mean': prior_mean, 'sd': prior_sd}
            programs = [
                ProgramData(
                    triangle_id=t.triangle_id,
                    me=MeasurementErrorInput(mean=s.mean, sd=s.sd, prior_mean=prior_mean, prior_sd=prior_sd),
                    premiums=t.premiums,
                )
                for t, s in zip(members, line_summaries)
            ]
            for kind_idx, kind in enumerate(kinds, start=1):
                fits = self._forecast_fits(line, line_idx, kind, kind_idx, programs, out, result)
                for g, (t, draws) in enumerate(zip(members, fits), start=1):
                    seed = derive_seed(self.config.seed, _COMMAND_KEYS['forecast'], line_idx, kind_idx, g)
                    rng = np.random.default_rng(seed)
                    archives[kind.value].append(forecast(
                        draws, kind, settings.horizon, future.get(t.triangle_id), rng,
                        premiums_history=t.premiums, triangle_id=t.triangle_id,
                        last_accident_year=t.accident_years[-1],
                    ))

        for kind, draws in archives.items():
            if draws:
                frame = pd.concat([d.to_frame() for d in draws], ignore_index=True)
                result.files.append(self._write_csv(frame, out / f'{kind}_forecast.csv'))
        return self._finish(result, {'measurement_priors': priors_used,
                                     'prior_sds': resolved_prior_sds(self.config.prior_scale)})

    def _forecast_fits(self, line: str, line_idx: int, kind: ModelKind, kind_idx: int,
                       programs: List[ProgramData], out: Path, result: CommandResult) -> List[DrawMatrix]:
        settings = self.config.forecast
        sampler = self.sampler('forecast', line_idx, kind_idx)
        if settings.hierarchical:
            hcfg = HierarchicalConfig(group=line, prior_scale=self.config.prior_scale,
                                      measurement_error=settings.measurement_error)
            hier = fit_hierarchical(programs, kind, hcfg, sampler)
            result.files.extend(hier.to_csv(out / 'draws' / f'{line}_{kind.value}.csv'))
            return [program_draws(hier, g) for g in range(1, len(programs) + 1)]

        priors = ForecastPriors().scaled(self.config.prior_scale)
        if settings.derived_priors:
            hcfg = HierarchicalConfig(group=line, prior_scale=self.config.prior_scale,
                                      measurement_error=settings.measurement_error)
            hier = fit_hierarchical(programs, kind, hcfg, sampler)
            result.files.extend(hier.to_csv(out / 'draws' / f'{line}_{kind.value}_pooled.csv'))
            priors = derive_priors(hier, inflation=settings.prior_inflation, base=priors)
        jobs = [(kind, p.me, p.premiums, priors, settings.measurement_error,
                 self.sampler('forecast', line_idx, kind_idx, g))
                for g, p in enumerate(programs, start=1)]
        fits = run_jobs(fit_forecast, jobs, self.config.workers)
        for p, draws in zip(programs, fits):
            result.files.extend(draws.to_csv(out / 'draws' / f'{p.triangle_id}_{kind.value}.csv'))
        return fits

    # calibration

    def sbc(self) -> CommandResult:
        """Simulation-based calibration of the configured model family."""
        out = self.output_dir('sbc')
        result = CommandResult('sbc', out)
        settings = self.config.sbc
        cfg = SbcConfig(
            family=SbcFamily(settings.family), n_dev_lags=settings.n_dev_lags, tau=settings.tau,
            rho=tuple(settings.rho), prior_scale=self.config.prior_scale, sigma_scale=settings.sigma_scale,
            thin_to=settings.thin_to, bins=settings.bins, level=settings.level,
            forecast_kind=ModelKind(settings.forecast_kind), workers=self.config.workers,
            sampler=self.sampler('sbc'),
        )
        rng = np.random.default_rng(derive_seed(self.config.seed, _COMMAND_KEYS['sbc']))
        report = run_sbc(cfg.family, cfg, settings.simulations, rng)
        result.files.append(report.to_json(out / 'report.json'))
        result.files.append(report.to_csv(out / 'ranks.csv'))
        result.files.append(self._write_csv(report.summary_frame(), out / 'summary.csv'))
        return self._finish(result, {'retained': report.retained, 'excluded': report.excluded,
                                     'unreliable': report.unreliable, 'passes': report.passes()})

    # backtest

    def backtest_config(self) -> BacktestConfig:
        cfg = self.config
        explicit = cfg.measurement_prior.source == 'explicit'
        return BacktestConfig(
            models=tuple(ModelKind(m) for m in cfg.forecast.models),
            line_settings={line: s.model_dump(exclude_none=True) for line, s in cfg.lines.items()},
            prior_scale=cfg.prior_scale,
            loss_scale=cfg.loss_scale,
            measurement_error=cfg.forecast.measurement_error,
            prior_mean=cfg.measurement_prior.mean if explicit else None,
            prior_sd=cfg.measurement_prior.sd if explicit else None,
            test_rows=cfg.backtest.test_rows,
            failure_threshold=cfg.backtest.failure_threshold,
            archive_draws=cfg.backtest.archive_draws,
            seed=cfg.seed,
            workers=cfg.workers,
            dev_sampler=self.sampler('backtest', 1),
            forecast_sampler=self.sampler('backtest', 2),
        )

    def backtest(self) -> CommandResult:
        """Leave-future-out backtest with score tables and comparisons."""
        out = self.output_dir('backtest')
        result = CommandResult('backtest', out)
        backtest = run_backtest(self._load_corpus(), self.backtest_config())
        result.files.extend(backtest.write(out))
        generator = ReportGenerator()
        result.files.append(generator.write(render_backtest_report(backtest), out / 'report.md'))
        result.failures.extend(backtest.failures)
        result.failures.extend({'line': line, 'error': reason} for line, reason in backtest.aborted_lines.items())
        return self._finish(result, {'prior_sds': resolved_prior_sds(self.config.prior_scale)})

    # stacking

    def stack(self) -> CommandResult:
        """Fit stacking weights on test scores and score the blend on validation."""
        backtest_dir = Path(self.config.paths.output_dir) / 'backtest'
        scores_path, draws_path = backtest_dir / 'scores.csv', backtest_dir / 'predictive_draws.csv'
        self._require(scores_path, draws_path)
        out = self.output_dir('stack')
        result = CommandResult('stack', out)
        settings = self.config.stack
        if not settings.enabled:
            self.logger.warning("Stacking is disabled in the configuration; nothing to do")
            return self._finish(result)

        scores = ScoreTable.from_csv(scores_path)
        predictive, premiums = read_predictive_draws(draws_path)
        models = scores.models
        scopes = scores.lines if settings.per_line else [None]
        rng = np.random.default_rng(derive_seed(self.config.seed, _COMMAND_KEYS['stack']))

        combined = scores
        all_weights: Dict[str, Dict[str, float]] = {}
        objectives, blended = [], []
        for scope in scopes:
            label = scope or 'all'
            data = StackInput.from_scores(scores, models, line=scope)
            weights = fit_stack(data, tol=settings.tol, max_iter=settings.max_iter)
            if not weights.converged:
                result.failures.append({'scope': label, 'error': 'stacking did not converge'})
            all_weights[label] = weights.weights
            result.files.append(weights.to_json(out / f'weights_{label}.json'))
            table = stacked_objective_table(data, weights)
            table.insert(0, 'scope', label)
            objectives.append(table)
            combined = stack_scores(combined, weights, predictive, premiums, rng, line=scope)
            blended.extend(self._blended_frames(weights, predictive, scope, rng))

        result.files.append(combined.to_csv(out / 'scores_with_stacked.csv'))
        result.files.append(self._write_csv(pd.concat(objectives, ignore_index=True), out / 'objectives.csv'))
        if blended:
            result.files.append(self._write_csv(pd.concat(blended, ignore_index=True), out / 'blended_draws.csv'))

        comparisons = [elpd_and_diff(combined, 'stacked', m, 'validation').to_dict() for m in models]
        path = out / 'comparisons.json'
        path.write_text(json.dumps(comparisons, indent=2, default=float))
        result.files.append(path)

        generator = ReportGenerator()
        calibration = [calibration_summary(combined, m) for m in models + ['stacked']]
        report = generator.render_backtest_report(
            comparisons, calibration, weights=all_weights, title='Stacking report')
        result.files.append(generator.write(report, out / 'report.md'))
        return self._finish(result, {'weights': all_weights})

    @staticmethod
    def _blended_frames(weights, predictive, scope, rng) -> List[pd.DataFrame]:
        frames = []
        keys = sorted({(line, tid) for line, tid, _ in predictive if scope is None or line == scope})
        for line, tid in keys:
            draws = blend(weights, {m: predictive[(line, tid, m)] for m in weights.models}, rng)
            s, k = draws.shape
            frames.append(pd.DataFrame({
                'line': line,
                'triangle_id': tid,
                'accident_year': np.tile(np.arange(1, k + 1), s),
                'draw': np.repeat(np.arange(s), k),
                'loss_ratio': draws.ravel(),
            }))
        return frames

    # cashflows

    def cashflow(self) -> CommandResult:
        """Walk forecast ultimates back through development-factor draws."""
        settings = self.config.cashflow
        base = Path(self.config.paths.output_dir)
        forecast_path = base / 'forecast' / f'{settings.model}_forecast.csv'
        self._require(forecast_path, base / 'develop' / 'draws')
        out = self.output_dir('cashflow')
        result = CommandResult('cashflow', out)

        corpus = {t.triangle_id: t for t in self._load_corpus()}
        paths_frames, summaries = [], []
        for triangle_id, fd in read_forecast_draws(forecast_path).items():
            t = corpus.get(triangle_id)
            body_path = base / 'develop' / 'draws' / f'{triangle_id}_body.csv'
            tail_path = base / 'develop' / 'draws' / f'{triangle_id}_tail.csv'
            self._require(body_path, tail_path)
            if t is None:
                raise DependencyMissingError("Forecast triangle is not in the corpus", {'triangle_id': triangle_id})
            factors = development_factors(DrawMatrix.from_csv(body_path), DrawMatrix.from_csv(tail_path),
                                          self.dev_config(t), t.n_dev_lags)
            paths = walkback(fd.loss, factors, fd.premiums, fd.accident_years, triangle_id)
            paths_frames.append(paths.to_frame())
            summaries.append(cashflow_summary(paths, settings.quantiles))

        result.files.append(self._write_csv(pd.concat(paths_frames, ignore_index=True), out / 'paths.csv'))
        result.files.append(self._write_csv(pd.concat(summaries, ignore_index=True), out / 'summary.csv'))
        return self._finish(result)

    @staticmethod
    def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format='%.17g')
        return path

