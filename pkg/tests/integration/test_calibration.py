"""
Integration tests for model calibration.
Runs simulation-based calibration of the development models and a backtest of
a corpus simulated from the random-walk forecaster, at reduced draw counts.
"""

import numpy as np
import pytest

from src.backtest.metrics import elpd_and_diff
from src.backtest.pipeline import BacktestConfig, run_backtest
from src.inference.sampler import SamplerConfig
from src.models.forecasting.state_space import ModelKind
from src.stacking.stacker import StackInput, fit_stack, stack_objective
from src.utils.parallel import default_workers
from src.validation.sbc import SbcConfig, SbcFamily, run_sbc
from src.validation.simulators import simulate_random_walk_corpus


def _sbc_config(sigma_scale: float = 1.0) -> SbcConfig:
    return SbcConfig(
        family=SbcFamily.DEVELOPMENT, n_dev_lags=8, tau=4, rho=(5, 8), thin_to=100, bins=20, level=0.99,
        sigma_scale=sigma_scale, workers=default_workers(),
        sampler=SamplerConfig(chains=4, warmup=300, samples=100, max_leapfrog=256),
    )


@pytest.fixture(scope='module')
def backtest_result():
    """Backtest of 40 random-walk triangles with both forecasters"""
    corpus = simulate_random_walk_corpus(40, 10, np.random.default_rng(2024), line='PP')
    cfg = BacktestConfig(
        models=(ModelKind.RANDOM_WALK, ModelKind.MEAN_REVERSION), seed=99, workers=default_workers(),
        dev_sampler=SamplerConfig(chains=2, warmup=200, samples=200, max_leapfrog=256),
        forecast_sampler=SamplerConfig(chains=4, warmup=400, samples=200, max_leapfrog=512),
    )
    return run_backtest(corpus, cfg)


@pytest.mark.integration
@pytest.mark.slow
class TestDevelopmentCalibration:
    """Test rank uniformity of the development models at desk scale."""

    def test_well_specified_model_is_calibrated(self):
        report = run_sbc(SbcFamily.DEVELOPMENT, _sbc_config(), 200, np.random.default_rng(8))
        assert not report.unreliable
        assert report.calibrated_fraction() >= 0.9, report.summary_frame().to_string()
        assert report.passes()

    def test_overconfident_fit_is_detected(self):
        """Test halving the fitted noise scale skews the ranks well outside the band."""
        report = run_sbc(SbcFamily.DEVELOPMENT, _sbc_config(sigma_scale=0.5), 200, np.random.default_rng(8))
        assert report.max_band_violations() > 5, report.summary_frame().to_string()
        assert not report.passes()


@pytest.mark.integration
@pytest.mark.slow
class TestRandomWalkBacktest:
    """Test a backtest on data generated by the random-walk forecaster."""

    def test_random_walk_wins_on_validation(self, backtest_result):
        comparison = elpd_and_diff(backtest_result.scores, 'rw', 'mr', split='validation')
        assert comparison.n == 40
        assert comparison.elpd_diff > 2 * comparison.elpd_se

    def test_stacking_is_at_least_as_good_as_each_model(self, backtest_result):
        data = StackInput.from_scores(backtest_result.scores, ['rw', 'mr'])
        weights = fit_stack(data)
        for k in range(len(data.models)):
            single = np.zeros(len(data.models))
            single[k] = 1.0
            assert weights.objective >= stack_objective(data.lpd, single) - 1e-6

    def test_validation_percentiles_are_calibrated(self, backtest_result):
        summary = backtest_result.calibration('rw')
        assert summary['n'] == 40
        assert summary['violations'] <= 2, summary['counts']
