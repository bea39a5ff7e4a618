"""Unit tests for the chain-ladder body, Bondy tail and development simulation."""

import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from src.inference.diagnostics import check_gradient
from src.inference.draws import DrawMatrix
from src.models.development import bondy, chain_ladder
from src.models.development.bondy import BondyModel, BondyParams, bondy_log_density
from src.models.development.chain_ladder import ChainLadderModel, ChainLadderParams, cl_log_density
from src.models.development.config import DevConfig, development_cells
from src.models.development.fit import resolve_loss_scale
from src.models.development.simulation import (
    DevelopmentDraws,
    UltimateSummary,
    development_factors,
    read_ultimate_summaries,
    sample_dev_prior,
    simulate_development,
    simulate_paths,
)
from src.utils.errors import ConfigError, DataValidationError, ModelEvaluationError

SMALL_CFG = DevConfig(tau=3, rho=(2, 3))


def _body_matrix(cl: ChainLadderParams, n: int = 4) -> DrawMatrix:
    return DrawMatrix.from_flat({
        'log_alpha': np.tile(cl.log_alpha, (n, 1)),
        'gamma1': np.full(n, cl.gamma1),
        'gamma2': np.full(n, cl.gamma2),
    })


def _tail_matrix(b: BondyParams, n: int = 4) -> DrawMatrix:
    return DrawMatrix.from_flat({
        'log_omega': np.full(n, b.log_omega),
        'logit_beta': np.full(n, b.logit_beta),
        'lambda1': np.full(n, b.lambda1),
        'lambda2': np.full(n, b.lambda2),
    })


@pytest.mark.unit
class TestDevConfig:
    """Test development settings validation."""

    def test_line_defaults(self):
        assert DevConfig.for_line('WC').tau == 6
        assert DevConfig.for_line('WC').rho == (4, 10)
        assert DevConfig.for_line('unknown').tau == 4
        assert DevConfig.for_line('PP', tau=3).tau == 3

    @pytest.mark.parametrize('kwargs', [
        {'tau': 1}, {'rho': (1, 5)}, {'rho': (6, 5)}, {'prior_scale': 0.0},
        {'loss_scale': -1.0}, {'j_max': 1},
    ])
    def test_invalid_settings(self, kwargs):
        with pytest.raises(ConfigError):
            DevConfig(**kwargs)

    def test_validate_against_triangle(self):
        """Test windows beyond the last lag are rejected."""
        with pytest.raises(ConfigError):
            DevConfig(tau=4, rho=(5, 10)).validate_for(8)
        with pytest.raises(ConfigError):
            DevConfig(tau=4, rho=(5, 8), j_max=7).validate_for(8)
        DevConfig(tau=4, rho=(5, 8)).validate_for(8)

    def test_horizon_defaults_to_four_times_lags(self):
        assert DevConfig().horizon(10) == 40
        assert DevConfig(j_max=12).horizon(10) == 12

    def test_tail_window(self):
        assert DevConfig(rho=(4, 10)).tail_window == (4, 10)


@pytest.mark.unit
class TestDevelopmentCells:
    """Test extraction of training cells."""

    def test_window(self, small_triangle):
        cells = development_cells(small_triangle, 2, 3)
        assert cells.size == 3
        assert sorted(zip(cells.i.tolist(), cells.j.tolist())) == [(1, 2), (1, 3), (2, 2)]

    def test_loss_scale(self, small_triangle):
        plain = development_cells(small_triangle, 2, 2)
        scaled = development_cells(small_triangle, 2, 2, loss_scale=100.0)
        np.testing.assert_allclose(plain.log_y - scaled.log_y, math.log(100.0))

    def test_empty_window(self, small_triangle):
        with pytest.raises(DataValidationError):
            development_cells(small_triangle, 4, 6)

    def test_auto_loss_scale(self, small_triangle):
        assert resolve_loss_scale(small_triangle, 'auto') == pytest.approx(110.0)
        assert resolve_loss_scale(small_triangle, 2) == 2.0


@pytest.mark.unit
class TestChainLadder:
    """Test the chain-ladder body density."""

    def test_density_matches_direct_sum(self, small_triangle):
        """Test the density against scipy lognormal and normal log pdfs."""
        p = ChainLadderParams(log_alpha=np.array([0.4, 0.1]), gamma1=-3.2, gamma2=-0.9)
        lp, _ = cl_log_density(p, small_triangle, SMALL_CFG)

        y = small_triangle.losses
        expected = 0.0
        for i, j in ((1, 2), (2, 2), (1, 3)):
            prev = y[i - 1, j - 2]
            mu = p.log_alpha[j - 2] + math.log(prev)
            var = math.exp(p.gamma1 + p.gamma2 * j + math.log(prev))
            expected += stats.lognorm.logpdf(y[i - 1, j - 1], s=math.sqrt(var), scale=math.exp(mu))
        expected += stats.norm.logpdf(p.log_alpha, 0.0, 1.0).sum()
        expected += stats.norm.logpdf(p.gamma1, -3.0, 0.25) + stats.norm.logpdf(p.gamma2, -1.0, 0.1)
        assert lp == pytest.approx(expected, abs=1e-10)

    def test_prior_scale_widens_priors(self, small_triangle):
        model = ChainLadderModel(small_triangle, DevConfig(tau=3, rho=(2, 3), prior_scale=2.0))
        assert model.prior_summary()['gamma1'] == (-3.0, 0.5)

    def test_gradients_at_prior_points(self, runoff, dev_config, rng):
        """Test analytic gradients at 20 prior draws."""
        model = ChainLadderModel(runoff, dev_config)
        for _ in range(20):
            z = model.space.unconstrain(model.sample_prior(rng))
            assert check_gradient(model, z) < 1e-5

    def test_generated_factors(self, small_triangle):
        model = ChainLadderModel(small_triangle, SMALL_CFG)
        gq = model.generated_quantities({'log_alpha': np.array([0.0, math.log(2.0)])})
        np.testing.assert_allclose(gq['alpha'], [1.0, 2.0])

    def test_prior_implied_link_ratio(self):
        """Test the default log-factor prior implies a median link ratio of one."""
        loc, scale = chain_ladder.PRIORS['log_alpha']
        ratios = np.exp(np.random.default_rng(1).normal(loc, scale, size=1_000_000))
        assert np.median(ratios) == pytest.approx(1.00, abs=0.01)
        assert ratios.mean() == pytest.approx(1.65, abs=0.02)
        assert ratios.std() == pytest.approx(2.16, abs=0.05)

    def test_non_finite_density(self, small_triangle):
        p = ChainLadderParams(log_alpha=np.array([0.0, 0.0]), gamma1=math.inf, gamma2=-1.0)
        with pytest.raises(ModelEvaluationError):
            cl_log_density(p, small_triangle, SMALL_CFG)


@pytest.mark.unit
class TestBondy:
    """Test the Bondy tail density."""

    def test_density_matches_direct_sum(self, small_triangle):
        p = BondyParams(log_omega=0.3, logit_beta=-1.0, lambda1=-3.1, lambda2=-0.8)
        lp, _ = bondy_log_density(p, small_triangle, SMALL_CFG)

        y = small_triangle.losses
        beta = 1.0 / (1.0 + math.exp(1.0))
        expected = 0.0
        for i, j in ((1, 2), (2, 2), (1, 3)):
            prev = y[i - 1, j - 2]
            mu = p.log_omega * beta ** j + math.log(prev)
            var = math.exp(p.lambda1 + p.lambda2 * j + math.log(prev))
            expected += stats.lognorm.logpdf(y[i - 1, j - 1], s=math.sqrt(var), scale=math.exp(mu))
        expected += stats.halfnorm.logpdf(0.3, scale=1.0)
        expected += stats.norm.logpdf(-1.0, -2.0, 0.5)
        expected += stats.norm.logpdf(-3.1, -3.0, 0.25) + stats.norm.logpdf(-0.8, -1.0, 0.1)
        assert lp == pytest.approx(expected, abs=1e-10)

    def test_factor_decays_to_one(self):
        p = BondyParams(log_omega=0.5, logit_beta=0.0, lambda1=-3.0, lambda2=-1.0)
        log_factors = p.log_factor(np.arange(2, 30))
        assert np.all(np.diff(log_factors) < 0)
        assert log_factors[-1] == pytest.approx(0.0, abs=1e-7)

    def test_gradients_at_prior_points(self, runoff, dev_config, rng):
        model = BondyModel(runoff, dev_config)
        for _ in range(20):
            z = model.space.unconstrain(model.sample_prior(rng))
            assert check_gradient(model, z) < 1e-5

    def test_prior_draws_are_non_negative(self, dev_config, rng):
        draws = [bondy.sample_bondy_prior(dev_config, rng).log_omega for _ in range(200)]
        assert min(draws) >= 0.0


@pytest.mark.unit
class TestDevelopmentSimulation:
    """Test forward simulation of development."""

    def test_prior_draw_shapes(self, dev_config, rng):
        cl, tail = sample_dev_prior(dev_config, rng, 10)
        assert cl.log_alpha.shape == (9,)
        assert isinstance(tail, BondyParams)

    def test_mismatched_draw_counts(self, true_cl, true_bondy):
        with pytest.raises(DataValidationError):
            DevelopmentDraws.from_matrices(_body_matrix(true_cl, 4), _tail_matrix(true_bondy, 6))

    def test_regime_switch_at_tau(self, true_cl, true_bondy):
        params = DevelopmentDraws.from_params(true_cl, true_bondy)
        assert params.log_factor(4, tau=4)[0] == pytest.approx(true_cl.log_alpha[2])
        assert params.log_factor(5, tau=4)[0] == pytest.approx(0.4 * true_bondy.beta ** 5)

    def test_noiseless_paths_multiply_factors(self, runoff, true_cl, true_bondy, rng):
        """Test near-zero variance reduces simulation to the product of factors."""
        quiet_cl = ChainLadderParams(true_cl.log_alpha, gamma1=-60.0, gamma2=0.0)
        quiet_tail = BondyParams(true_bondy.log_omega, true_bondy.logit_beta, lambda1=-60.0, lambda2=0.0)
        params = DevelopmentDraws.from_params(quiet_cl, quiet_tail)
        cfg = DevConfig(tau=4, rho=(5, 10), j_max=12)

        _, ultimates = simulate_paths(params, runoff.losses[:, 0], cfg, 10, rng, observed=runoff.losses)

        for i in range(10):
            last = int(runoff.last_observed_lag[i])
            log_growth = sum(params.log_factor(j, 4)[0] for j in range(last + 1, 13))
            expected = runoff.losses[i, last - 1] * math.exp(log_growth)
            assert ultimates[0, i] == pytest.approx(expected, rel=1e-9)

    def test_conditioning_keeps_observed_cells(self, full_square, true_cl, true_bondy, rng):
        """Test a fully observed square with j_max = M reproduces its last column."""
        cfg = DevConfig(tau=4, rho=(5, 10), j_max=10)
        summary = simulate_development(_body_matrix(true_cl), _tail_matrix(true_bondy),
                                       full_square, cfg, rng)
        np.testing.assert_allclose(summary.mean, full_square.losses[:, -1] / full_square.premiums)
        np.testing.assert_allclose(summary.sd, 0.0, atol=1e-12)
        assert summary.draws.shape == (4, 10)

    def test_loss_scale_is_undone(self, runoff, true_cl, true_bondy):
        """Test ultimates are reported on the original scale."""
        cfg = DevConfig(tau=4, rho=(5, 10), j_max=10, loss_scale=50.0)
        summary = simulate_development(_body_matrix(true_cl), _tail_matrix(true_bondy), runoff, cfg,
                                       np.random.default_rng(5))
        assert summary.mean[0] == pytest.approx(runoff.losses[0, -1] / runoff.premiums[0])
        assert np.all(np.isfinite(summary.mean))

    def test_overflow_is_reported(self, runoff, true_bondy, rng):
        wild = ChainLadderParams(np.full(9, 400.0), gamma1=-3.0, gamma2=-1.0)
        params = DevelopmentDraws.from_params(wild, true_bondy)
        with pytest.raises(ModelEvaluationError):
            simulate_paths(params, runoff.losses[:, 0], DevConfig(tau=4, rho=(5, 10)), 10, rng)
        paths, _ = simulate_paths(params, runoff.losses[:, 0], DevConfig(tau=4, rho=(5, 10)), 10, rng,
                                  strict=False)
        assert np.isnan(paths[0, 0, -1])

    def test_single_remaining_step_is_lognormal(self, small_triangle, true_cl, true_bondy):
        """Test ultimates one step from the horizon follow the chain-ladder lognormal (KS at 1%)."""
        s = 4000
        cfg = DevConfig(tau=3, rho=(2, 3), j_max=3)
        summary = simulate_development(_body_matrix(true_cl, s), _tail_matrix(true_bondy, s),
                                       small_triangle, cfg, np.random.default_rng(17))
        log_ultimate = np.log(summary.draws[:, 1] * small_triangle.premiums[1])
        loc = true_cl.log_alpha[1] + math.log(160.0)
        scale = math.exp(0.5 * (true_cl.gamma1 + 3 * true_cl.gamma2 + math.log(160.0)))
        assert stats.kstest(log_ultimate, 'norm', args=(loc, scale)).pvalue > 0.01

    def test_two_steps_match_a_direct_simulation(self, small_triangle, true_cl, true_bondy):
        """Test compounded steps against a scalar loop over the same lognormal transitions (KS at 1%)."""
        s = 4000
        cfg = DevConfig(tau=3, rho=(2, 3), j_max=3)
        summary = simulate_development(_body_matrix(true_cl, s), _tail_matrix(true_bondy, s),
                                       small_triangle, cfg, np.random.default_rng(18))
        rng = np.random.default_rng(19)
        direct = np.empty(s)
        for k in range(s):
            log_y = math.log(120.0)
            for j in (2, 3):
                sd = math.exp(0.5 * (true_cl.gamma1 + true_cl.gamma2 * j + log_y))
                log_y = rng.normal(true_cl.log_alpha[j - 2] + log_y, sd)
            direct[k] = math.exp(log_y) / small_triangle.premiums[2]
        assert stats.ks_2samp(summary.draws[:, 2], direct).pvalue > 0.01

    def test_development_factors(self, true_cl, true_bondy):
        factors = development_factors(_body_matrix(true_cl), _tail_matrix(true_bondy),
                                      DevConfig(tau=4, rho=(5, 10)), 10)
        assert factors.shape == (4, 9)
        np.testing.assert_allclose(factors[0, :3], np.exp(true_cl.log_alpha[:3]))
        assert factors[0, 3] == pytest.approx(math.exp(0.4 * true_bondy.beta ** 5))


@pytest.mark.unit
class TestUltimateSummary:
    """Test summary containers and persistence."""

    def test_from_draws(self, small_triangle):
        draws = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
        summary = UltimateSummary.from_draws(small_triangle, draws)
        np.testing.assert_allclose(summary.mean, [2.0, 2.0, 2.0])
        np.testing.assert_allclose(summary.ultimate_losses[0], [200.0, 420.0, 660.0])

    def test_shape_check(self):
        with pytest.raises(DataValidationError):
            UltimateSummary('T', (1, 2), np.ones(2), np.ones(3), np.ones(2))

    def test_csv_round_trip(self, small_triangle, tmp_path):
        draws = np.random.default_rng(0).lognormal(size=(50, 3))
        summary = UltimateSummary.from_draws(small_triangle, draws)
        summary.to_csv(tmp_path / 'u.csv', tmp_path / 'd.csv')

        back = read_ultimate_summaries(tmp_path / 'u.csv')['T1']
        np.testing.assert_allclose(back.mean, summary.mean, rtol=1e-15)
        assert back.accident_years == (2001, 2002, 2003)
        assert len(pd.read_csv(tmp_path / 'd.csv')) == 150
