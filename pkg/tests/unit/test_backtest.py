"""Unit tests for backtest splits, metrics and the pipeline bookkeeping."""

import math

import numpy as np
import pandas as pd
import pytest

from src.backtest.metrics import (
    SCORE_COLUMNS,
    ScoreTable,
    calibration_histogram,
    elpd_and_diff,
    lpd,
    percentile,
    rmse,
)
from src.backtest.pipeline import (
    BacktestConfig,
    BacktestResult,
    calibration_summary,
    read_predictive_draws,
    run_backtest,
    score_program,
)
from src.backtest.split import make_split
from src.data.triangle import Triangle, to_runoff
from src.models.forecasting.forecast import PredictiveDistribution
from src.utils.errors import DataValidationError, ModelEvaluationError


@pytest.fixture
def square_3x3():
    """Smallest square a backtest accepts"""
    losses = np.array([[50.0, 80.0, 90.0], [55.0, 85.0, 95.0], [60.0, 90.0, 99.0]])
    return Triangle('S', 'PP', losses, np.full(3, 150.0))


@pytest.fixture
def scores():
    """Two models on two triangles with test and validation rows"""
    table = ScoreTable()
    for triangle_id, lpd_a, lpd_b in (('T1', -1.0, -3.0), ('T2', -2.0, -2.0)):
        table.add('PP', triangle_id, 'rw', 'validation', 10, 100.0, lpd_a, 5.0, 0.4)
        table.add('PP', triangle_id, 'mr', 'validation', 10, 100.0, lpd_b, 7.0, 0.6)
        table.add('PP', triangle_id, 'rw', 'test', 2, 90.0, -1.5, 4.0, 0.3)
        table.add('PP', triangle_id, 'mr', 'test', 2, 90.0, -1.2, 4.5, 0.5)
    return table


@pytest.mark.unit
class TestSplit:
    """Test leave-future-out splits."""

    def test_ten_by_ten(self, full_square):
        split = make_split(full_square)
        cells = split.target_cells()
        assert len(cells['train']) == 55
        assert cells['observed'] == {(1, 10)}
        assert len(cells['test']) == 8
        assert cells['validation'] == {(10, 10)}
        assert split.test_rows == tuple(range(2, 10))

    def test_three_by_three(self, square_3x3):
        cells = make_split(square_3x3).target_cells()
        assert [len(cells[k]) for k in ('train', 'observed', 'test', 'validation')] == [6, 1, 1, 1]

    def test_targets(self, square_3x3):
        split = make_split(square_3x3)
        assert split.observed_ultimate == 90.0
        assert split.validation_target == 99.0
        assert split.test_targets == {2: 95.0}
        assert split.loss_ratio(3) == pytest.approx(99.0 / 150.0)

    def test_training_region_hides_targets(self, full_square):
        split = make_split(full_square)
        assert not split.train_mask[9, 9]
        assert not split.train_mask[1, 9]
        assert split.train_mask[0, 9]

    def test_custom_test_rows(self, full_square):
        assert make_split(full_square, [5, 3, 3]).test_rows == (3, 5)
        with pytest.raises(DataValidationError):
            make_split(full_square, [1])
        with pytest.raises(DataValidationError):
            make_split(full_square, [10])

    def test_needs_full_square(self, runoff):
        with pytest.raises(DataValidationError):
            make_split(runoff)

    def test_needs_three_years(self):
        t = Triangle('Q', 'PP', np.array([[1.0, 2.0], [1.0, 2.0]]), np.ones(2))
        with pytest.raises(DataValidationError):
            make_split(t)


@pytest.mark.unit
class TestMetrics:
    """Test per-target metrics."""

    def test_lpd_of_two_draws(self):
        assert lpd([0.0, -2.0]) == pytest.approx(math.log((1 + math.exp(-2)) / 2))
        assert lpd([0.0, -2.0]) == pytest.approx(-0.6263, abs=1e-4)

    def test_lpd_underflow(self):
        assert lpd([-1e5, -1e5 - 1]) == pytest.approx(-1e5 + math.log((1 + math.exp(-1)) / 2))
        assert lpd([-np.inf, -np.inf]) == -np.inf

    def test_lpd_errors(self):
        with pytest.raises(ValueError):
            lpd([])
        with pytest.raises(DataValidationError):
            lpd([0.0, np.nan])

    def test_rmse_limit(self):
        draws = np.random.default_rng(0).normal(10.0, 2.0, size=1_000_000)
        assert rmse(10.0, draws) == pytest.approx(2.0, rel=0.01)
        assert rmse(3.0, [3.0, 3.0]) == 0.0

    def test_percentile_counts_strictly_below(self):
        assert percentile(1.0, [0.0, 1.0, 2.0]) == pytest.approx(1 / 3)
        assert percentile(5.0, [0.0, 1.0]) == 1.0

    def test_calibration_histogram(self):
        np.testing.assert_array_equal(calibration_histogram([0.0, 0.5, 1.0], bins=2), [1, 2])
        with pytest.raises(DataValidationError):
            calibration_histogram([1.5])


@pytest.mark.unit
class TestScoreTable:
    """Test score bookkeeping and comparisons."""

    def test_selection(self, scores):
        assert len(scores) == 8
        assert scores.models == ['rw', 'mr']
        assert scores.lines == ['PP']
        assert len(scores.select('rw', 'validation')) == 2
        assert scores.elpd('rw') == pytest.approx(-3.0)

    def test_unknown_split(self, scores):
        with pytest.raises(ValueError):
            scores.add('PP', 'T1', 'rw', 'train', 1, 1.0, 0.0, 0.0, 0.0)

    def test_lpd_matrix(self, scores):
        matrix = scores.lpd_matrix(['rw', 'mr'])
        assert matrix.shape == (2, 2)
        assert list(matrix.columns) == ['rw', 'mr']
        assert matrix.loc[('PP', 'T1', 2), 'mr'] == -1.2

    def test_csv_round_trip(self, scores, tmp_path):
        path = scores.to_csv(tmp_path / 'scores.csv')
        back = ScoreTable.from_csv(path)
        assert list(back.frame.columns) == SCORE_COLUMNS
        assert back.elpd('mr') == pytest.approx(-5.0)

    def test_from_csv_checks_columns(self, tmp_path):
        path = tmp_path / 'bad.csv'
        pd.DataFrame({'model': ['rw']}).to_csv(path, index=False)
        with pytest.raises(DataValidationError):
            ScoreTable.from_csv(path)

    def test_paired_difference(self, scores):
        """Test the pointwise differences {2, 0} give diff 2 and SE 2."""
        comparison = elpd_and_diff(scores, 'rw', 'mr')
        assert comparison.n == 2
        assert comparison.elpd_diff == pytest.approx(2.0)
        assert comparison.elpd_se == pytest.approx(2.0)
        assert comparison.rmse_diff == pytest.approx(-2.0)
        assert comparison.rmse_se == pytest.approx(0.0)
        assert comparison.n_dropped == 0

    def test_rmse_difference_is_a_mean(self):
        table = ScoreTable()
        for triangle_id, rmse_a, rmse_b in (('T1', 4.0, 5.0), ('T2', 6.0, 9.0), ('T3', 1.0, 1.0)):
            table.add('PP', triangle_id, 'rw', 'validation', 10, 100.0, -1.0, rmse_a, 0.5)
            table.add('PP', triangle_id, 'mr', 'validation', 10, 100.0, -1.0, rmse_b, 0.5)
        comparison = elpd_and_diff(table, 'rw', 'mr')
        d = np.array([-1.0, -3.0, 0.0])
        assert comparison.rmse_diff == pytest.approx(d.mean())
        assert comparison.rmse_se == pytest.approx(d.std(ddof=1) / math.sqrt(3))

    def test_targets_lost_by_both_models_are_dropped(self):
        table = ScoreTable()
        rows = (('T1', -1.0, -2.0, 3.0, 3.2), ('T2', -1.5, -2.5, 4.0, 4.4), ('T3', -math.inf, -math.inf, 5.0, 5.3))
        for triangle_id, lpd_rw, lpd_mr, rmse_rw, rmse_mr in rows:
            table.add('PP', triangle_id, 'rw', 'validation', 10, 100.0, lpd_rw, rmse_rw, 0.5)
            table.add('PP', triangle_id, 'mr', 'validation', 10, 100.0, lpd_mr, rmse_mr, 0.5)
        comparison = elpd_and_diff(table, 'rw', 'mr')
        assert comparison.n == 2
        assert comparison.n_dropped == 1
        assert comparison.elpd_a == pytest.approx(-2.5)
        assert comparison.elpd_b == pytest.approx(-4.5)
        assert comparison.elpd_diff == pytest.approx(2.0)
        assert comparison.elpd_se == pytest.approx(0.0)
        assert comparison.rmse_diff == pytest.approx(-0.3)
        assert not math.isnan(comparison.rmse_se)

    def test_target_lost_by_one_model_is_decisive(self):
        table = ScoreTable()
        for triangle_id, lpd_rw, lpd_mr in (('T1', -1.0, -2.0), ('T2', -math.inf, -2.5)):
            table.add('PP', triangle_id, 'rw', 'validation', 10, 100.0, lpd_rw, 1.0, 0.5)
            table.add('PP', triangle_id, 'mr', 'validation', 10, 100.0, lpd_mr, 1.0, 0.5)
        comparison = elpd_and_diff(table, 'rw', 'mr')
        assert comparison.n == 2
        assert comparison.n_dropped == 0
        assert comparison.elpd_diff == -math.inf
        assert math.isnan(comparison.elpd_se)

    def test_single_target_has_no_se(self, scores):
        comparison = elpd_and_diff(scores, 'rw', 'mr', split='test')
        assert comparison.n == 2
        single = ScoreTable(scores.select(split='validation').iloc[:2].reset_index(drop=True))
        assert math.isnan(elpd_and_diff(single, 'rw', 'mr').elpd_se)

    def test_mismatched_targets(self, scores):
        scores.add('PP', 'T3', 'rw', 'validation', 10, 100.0, -1.0, 1.0, 0.5)
        with pytest.raises(DataValidationError):
            elpd_and_diff(scores, 'rw', 'mr')

    def test_calibration_summary(self, scores):
        summary = calibration_summary(scores, 'rw')
        assert summary['n'] == 2
        assert sum(summary['counts']) == 2
        assert summary['band'] is None


@pytest.mark.unit
class TestScoring:
    """Test scoring one triangle and the pipeline guard rails."""

    def test_score_program(self, full_square):
        split = make_split(full_square)
        truth = np.array([split.loss_ratio(i) for i in range(1, 11)])
        s = 4000
        pred = PredictiveDistribution(
            loc=np.tile(np.log(truth), (s, 1)), scale=np.full((s, 10), 0.1),
            accident_years=full_square.accident_years, premiums=full_square.premiums, n_in_sample=9,
        )
        table = ScoreTable()
        ratios = score_program(split, pred, 'rw', table, np.random.default_rng(1))

        assert ratios.shape == (s, 10)
        assert len(table.select(split='test')) == 8
        validation = table.select(split='validation').iloc[0]
        assert validation['ultimate'] == split.validation_target
        assert validation['percentile'] == pytest.approx(0.5, abs=0.05)
        expected = -math.log(truth[9]) - math.log(0.1) - 0.5 * math.log(2 * math.pi)
        assert validation['lpd'] == pytest.approx(expected)

    def test_config_validation(self):
        with pytest.raises(DataValidationError):
            BacktestConfig(models=())
        with pytest.raises(DataValidationError):
            BacktestConfig(failure_threshold=1.0)
        assert BacktestConfig(models=['mr']).models[0].value == 'mr'

    def test_line_needs_two_triangles(self, rw_corpus):
        with pytest.raises(DataValidationError):
            run_backtest(rw_corpus[:1])

    def test_failed_development_aborts_line(self, rw_corpus, mocker):
        """Test a line is aborted when too many triangles fail development."""
        mocker.patch('src.backtest.pipeline.fit_development', side_effect=ModelEvaluationError('overflow'))
        cfg = BacktestConfig(line_settings={'PP': {'tau': 3, 'rho': (3, 6)}})
        result = run_backtest(rw_corpus[:3], cfg)
        assert 'PP' in result.aborted_lines
        assert len(result.failures) == 3
        assert all(f['stage'] == 'development' for f in result.failures)
        assert len(result.scores) == 0


@pytest.mark.unit
class TestBacktestResult:
    """Test writing and reading backtest outputs."""

    def test_write_and_read_predictive(self, scores, tmp_path):
        rng = np.random.default_rng(2)
        predictive = {('PP', t, m): rng.lognormal(-0.4, 0.1, size=(5, 3)) for t in ('T1', 'T2') for m in ('rw', 'mr')}
        premiums = {'T1': np.array([10.0, 11.0, 12.0]), 'T2': np.array([20.0, 21.0, 22.0])}
        result = BacktestResult(scores=scores, predictive=predictive, premiums=premiums)

        written = result.write(tmp_path)

        names = {p.name for p in written}
        assert {'scores.csv', 'comparisons.json', 'failures.csv', 'predictive_draws.csv'} <= names
        back, back_premiums = read_predictive_draws(tmp_path / 'predictive_draws.csv')
        np.testing.assert_allclose(back[('PP', 'T2', 'mr')], predictive[('PP', 'T2', 'mr')], rtol=1e-15)
        np.testing.assert_allclose(back_premiums['T1'], premiums['T1'])

    def test_comparisons_per_line_and_pooled(self, scores):
        comparisons = BacktestResult(scores=scores).comparisons()
        assert [c.line for c in comparisons] == ['PP', None]

    def test_training_triangle_matches_runoff(self, full_square):
        split = make_split(full_square)
        np.testing.assert_array_equal(split.train.observed, to_runoff(full_square, 10).observed)
