"""Unit tests for measurement error, state-space forecasters and hierarchical pooling."""

import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from src.inference.diagnostics import check_gradient, mcse
from src.inference.draws import DrawMatrix
from src.inference.sampler import SamplerConfig
from src.models.forecasting.forecast import (
    ForecastDraws,
    forecast,
    predictive_distribution,
    read_forecast_draws,
)
from src.models.forecasting.hierarchical import (
    HierarchicalConfig,
    HierarchicalModel,
    ProgramData,
    fit_hierarchical,
    program_draws,
)
from src.models.forecasting.measurement import (
    SD_FLOOR,
    MeasurementErrorInput,
    lognormal_moment_match,
    measurement_terms,
)
from src.models.forecasting.priors import derive_priors
from src.models.forecasting.state_space import (
    ForecastPriors,
    MeanReversionParams,
    ModelKind,
    RandomWalkParams,
    StateSpaceModel,
    mr_log_density,
    observation_variance,
    program_log_likelihood,
    rw_log_density,
)
from src.utils.errors import ConfigError, ConvergenceError, DataValidationError

PREMIUMS = np.array([100.0, 120.0, 150.0])


@pytest.fixture
def me():
    """Observed ultimate summaries for three accident years"""
    return MeasurementErrorInput(mean=np.array([0.62, 0.70, 0.66]), sd=np.array([0.01, 0.03, 0.08]),
                                 prior_mean=0.65, prior_sd=0.1)


def _forecaster_draws(eta, log_eps, fc_gamma, s=1, mu=None, logit_phi=None) -> DrawMatrix:
    flat = {
        'eta': np.tile(np.asarray(eta, dtype=float), (s, 1)),
        'log_eps': np.full(s, log_eps),
        'fc_gamma': np.tile(np.asarray(fc_gamma, dtype=float), (s, 1)),
    }
    if mu is not None:
        flat['mu'] = np.full(s, mu)
        flat['logit_phi'] = np.full(s, logit_phi)
    return DrawMatrix.from_flat(flat)


def _oracle(kind, p, me, premiums):
    """Independent sum of scipy log densities for the forecasting posterior."""
    priors = ForecastPriors()
    phi = 1.0 if kind is ModelKind.RANDOM_WALK else expit(p.logit_phi)
    mu = 0.0 if kind is ModelKind.RANDOM_WALK else p.mu
    eps = math.exp(p.log_eps)
    sigma = np.sqrt(np.exp(2 * p.fc_gamma[0]) + np.exp(2 * p.fc_gamma[1]) / np.sqrt(premiums))

    total, prev = 0.0, p.eta0
    for i, eta in enumerate(p.eta):
        total += stats.norm.logpdf(eta, mu * (1 - phi) + phi * prev, eps)
        total += stats.lognorm.logpdf(p.r_true[i], s=sigma[i], scale=math.exp(eta))
        m_loc, m_scale = lognormal_moment_match(p.r_true[i], me.sd[i])
        total += stats.lognorm.logpdf(me.mean[i], s=m_scale, scale=math.exp(m_loc))
        r_loc, r_scale = lognormal_moment_match(me.prior_mean, me.prior_sd)
        total += stats.lognorm.logpdf(p.r_true[i], s=r_scale, scale=math.exp(r_loc))
        prev = eta
    total += stats.norm.logpdf(p.log_eps, *priors.log_eps)
    total += stats.norm.logpdf(p.eta0, *priors.eta0)
    total += stats.norm.logpdf(p.fc_gamma, *priors.fc_gamma).sum()
    if kind is ModelKind.MEAN_REVERSION:
        total += stats.norm.logpdf(p.mu, *priors.mu) + stats.norm.logpdf(p.logit_phi, *priors.logit_phi)
    return total


@pytest.mark.unit
class TestMomentMatch:
    """Test lognormal moment matching."""

    def test_unit_mean_and_sd(self):
        mu, sigma = lognormal_moment_match(1.0, 1.0)
        assert mu == pytest.approx(-0.34657, abs=1e-5)
        assert sigma == pytest.approx(0.83255, abs=1e-5)

    @pytest.mark.parametrize('ratio', [0.01, 0.1, 1.0, 10.0])
    def test_recovers_moments(self, ratio):
        """Test the analytic lognormal moments of the matched parameters."""
        mean = 0.7
        mu, sigma = lognormal_moment_match(mean, ratio * mean)
        assert math.exp(mu + 0.5 * sigma ** 2) == pytest.approx(mean, rel=1e-12)
        sd = math.sqrt(math.expm1(sigma ** 2)) * math.exp(mu + 0.5 * sigma ** 2)
        assert sd == pytest.approx(ratio * mean, rel=1e-12)

    def test_monte_carlo(self):
        mu, sigma = lognormal_moment_match(1.0, 0.5)
        x = np.random.default_rng(0).lognormal(mu, sigma, size=1_000_000)
        assert x.mean() == pytest.approx(1.0, abs=0.003)
        assert x.std() == pytest.approx(0.5, abs=0.005)

    def test_vectorized(self):
        mu, sigma = lognormal_moment_match(np.array([1.0, 2.0]), np.array([0.0, 1.0]))
        assert mu[0] == pytest.approx(0.0)
        assert sigma[0] == 0.0
        assert mu.shape == (2,)

    def test_rejects_bad_inputs(self):
        with pytest.raises(DataValidationError):
            lognormal_moment_match(0.0, 1.0)
        with pytest.raises(DataValidationError):
            lognormal_moment_match(1.0, -0.1)


@pytest.mark.unit
class TestMeasurementError:
    """Test the measurement error input and its density terms."""

    def test_sd_floor(self):
        me = MeasurementErrorInput(mean=np.array([0.5, 0.8]), sd=np.array([0.0, 0.1]),
                                   prior_mean=0.6, prior_sd=0.1)
        assert me.sd[0] == pytest.approx(SD_FLOOR * 0.5)
        assert me.sd[1] == 0.1

    def test_missing_prior_disables_it(self, caplog):
        with caplog.at_level(logging.WARNING):
            me = MeasurementErrorInput(mean=np.array([0.5]), sd=np.array([0.1]))
        assert not me.use_prior
        assert 'prior disabled' in caplog.text

    def test_invalid_prior(self):
        with pytest.raises(DataValidationError):
            MeasurementErrorInput(mean=np.array([0.5]), sd=np.array([0.1]), prior_mean=0.5, prior_sd=0.0)

    def test_non_positive_mean(self):
        with pytest.raises(DataValidationError):
            MeasurementErrorInput(mean=np.array([0.0]), sd=np.array([0.1]))

    def test_subset(self, me):
        assert me.subset(2).n == 2
        assert me.subset(2).prior_mean == 0.65

    def test_gradient(self, me):
        """Test the latent-ratio gradient against finite differences."""
        r = np.array([0.6, 0.72, 0.7])
        _, grad = measurement_terms(r, me)
        h = 1e-7
        for k in range(3):
            up, down = r.copy(), r.copy()
            up[k] += h
            down[k] -= h
            numeric = (measurement_terms(up, me)[0] - measurement_terms(down, me)[0]) / (2 * h)
            assert grad[k] == pytest.approx(numeric, rel=1e-5, abs=1e-5)


@pytest.mark.unit
class TestStateSpaceDensities:
    """Test the random-walk and mean-reversion posteriors."""

    def test_observation_variance(self):
        var = observation_variance(np.array([math.log(0.1), math.log(0.2)]), np.array([4.0]))
        assert var[0] == pytest.approx(0.01 + 0.04 / 2.0)

    def test_random_walk_matches_oracle(self, me):
        p = RandomWalkParams(eta=np.array([-0.45, -0.38, -0.41]), eta0=-0.5, log_eps=-1.8,
                             fc_gamma=np.array([-2.5, -1.5]), r_true=np.array([0.63, 0.69, 0.67]))
        lp, _ = rw_log_density(p, me, PREMIUMS)
        assert lp == pytest.approx(_oracle(ModelKind.RANDOM_WALK, p, me, PREMIUMS), abs=1e-10)

    def test_mean_reversion_matches_oracle(self, me):
        p = MeanReversionParams(eta=np.array([-0.45, -0.38, -0.41]), eta0=-0.5, log_eps=-1.8,
                                fc_gamma=np.array([-2.5, -1.5]), r_true=np.array([0.63, 0.69, 0.67]),
                                mu=-0.4, logit_phi=0.7)
        lp, _ = mr_log_density(p, me, PREMIUMS)
        assert lp == pytest.approx(_oracle(ModelKind.MEAN_REVERSION, p, me, PREMIUMS), abs=1e-10)

    def test_mean_reversion_with_unit_phi_is_a_random_walk(self, me):
        eta, r_true = np.array([-0.45, -0.38, -0.41]), np.array([0.63, 0.69, 0.67])
        args = (eta, -0.5, -1.8, np.array([-2.5, -1.5]), r_true, me, PREMIUMS)
        walk, walk_grad = program_log_likelihood(*args)
        reverting, reverting_grad = program_log_likelihood(*args, mu=-0.9, logit_phi=math.inf)
        assert reverting == walk
        np.testing.assert_array_equal(reverting_grad['eta'], walk_grad['eta'])
        assert reverting_grad['mu'] == 0.0

    def test_unit_phi_differs_only_by_the_extra_priors(self, me):
        """Test logit(phi) = 40 rounds phi to 1 so only the mu and phi priors remain."""
        rw = RandomWalkParams(eta=np.array([-0.45, -0.38, -0.41]), eta0=-0.5, log_eps=-1.8,
                              fc_gamma=np.array([-2.5, -1.5]), r_true=np.array([0.63, 0.69, 0.67]))
        mr = MeanReversionParams(eta=rw.eta, eta0=rw.eta0, log_eps=rw.log_eps, fc_gamma=rw.fc_gamma,
                                 r_true=rw.r_true, mu=-0.2, logit_phi=40.0)
        priors = ForecastPriors()
        extra = stats.norm.logpdf(mr.mu, *priors.mu) + stats.norm.logpdf(mr.logit_phi, *priors.logit_phi)
        assert mr_log_density(mr, me, PREMIUMS)[0] - rw_log_density(rw, me, PREMIUMS)[0] == pytest.approx(extra)

    def test_observation_noise_falls_with_premium(self):
        premiums = np.array([1.0, 10.0, 100.0, 1e4, 1e6])
        sd = np.sqrt(observation_variance(np.array([-3.0, -1.0]), premiums))
        assert np.all(np.diff(sd) < 0)
        assert sd[-1] > math.exp(-3.0)

    def test_length_mismatch(self, me):
        p = RandomWalkParams(eta=np.zeros(2), eta0=0.0, log_eps=-1.0, fc_gamma=np.zeros(2))
        with pytest.raises(DataValidationError):
            rw_log_density(p, me, PREMIUMS)

    @pytest.mark.parametrize('kind', list(ModelKind))
    @pytest.mark.parametrize('measurement_error', [True, False])
    def test_gradients(self, me, kind, measurement_error, rng):
        """Test gradients at 20 random starting points."""
        model = StateSpaceModel(kind, me, PREMIUMS, measurement_error=measurement_error)
        for _ in range(20):
            z = model.initial_point(rng) + rng.normal(0.0, 0.3, size=model.space.dim)
            assert check_gradient(model, z) < 1e-5

    def test_prior_summary_of_random_walk(self, me):
        summary = StateSpaceModel(ModelKind.RANDOM_WALK, me, PREMIUMS).prior_summary()
        assert 'mu' not in summary
        assert summary['log_eps'] == (-0.5, 1.0)

    def test_scaled_priors(self):
        assert ForecastPriors().scaled(2.0).eta0 == (0.0, 2.0)


@pytest.mark.unit
class TestHierarchical:
    """Test the hierarchical forecaster."""

    @pytest.fixture
    def programs(self, me):
        other = MeasurementErrorInput(mean=np.array([0.8, 0.75, 0.9]), sd=np.array([0.02, 0.02, 0.1]),
                                      prior_mean=0.65, prior_sd=0.1)
        return [ProgramData('A', me, PREMIUMS), ProgramData('B', other, PREMIUMS * 2)]

    @pytest.mark.parametrize('kind', list(ModelKind))
    def test_gradients(self, programs, kind, rng):
        model = HierarchicalModel(programs, kind)
        for _ in range(20):
            z = model.initial_point(rng) + rng.normal(0.0, 0.3, size=model.space.dim)
            assert check_gradient(model, z) < 1e-5

    def test_layout(self, programs):
        model = HierarchicalModel(programs, ModelKind.RANDOM_WALK, HierarchicalConfig(measurement_error=False))
        assert 'eps_z_g2' in model.space
        assert 'r_true_g1' not in model.space
        assert model.n_programs == 2

    def test_prior_scale(self, programs):
        model = HierarchicalModel(programs, ModelKind.RANDOM_WALK, HierarchicalConfig(prior_scale=2.0))
        assert model.prior_summary()['eps_mu'] == (-2.0, 1.0)

    def test_needs_programs(self):
        with pytest.raises(ConfigError):
            HierarchicalModel([], ModelKind.RANDOM_WALK)

    def _relabel(self, values, order):
        """Values of the same state with programs listed in ``order``."""
        out = {name: values[name] for name in ('eps_mu', 'log_eps_sigma', 'eta_mu0', 'log_eta_sigma0')}
        for new, old in enumerate(order, start=1):
            for name, value in values.items():
                if name.endswith(f'_g{old}'):
                    out[name[:-len(f'_g{old}')] + f'_g{new}'] = value
        return out

    @pytest.mark.parametrize('kind', list(ModelKind))
    def test_density_ignores_program_order(self, programs, kind, rng):
        forward = HierarchicalModel(programs, kind)
        backward = HierarchicalModel(programs[::-1], kind)
        for _ in range(5):
            values = forward.space.constrain(forward.initial_point(rng))
            lp, _ = forward.log_density_constrained(values)
            lp_swapped, _ = backward.log_density_constrained(self._relabel(values, [2, 1]))
            assert lp_swapped == pytest.approx(lp, rel=1e-12)

    def test_identical_programs_are_interchangeable(self, me, rng):
        model = HierarchicalModel([ProgramData('A', me, PREMIUMS), ProgramData('B', me, PREMIUMS)],
                                  ModelKind.RANDOM_WALK)
        values = model.space.constrain(model.initial_point(rng))
        lp, _ = model.log_density_constrained(values)
        assert model.log_density_constrained(self._relabel(values, [2, 1]))[0] == pytest.approx(lp, rel=1e-12)

    def test_vanishing_spread_pools_completely(self, programs, rng):
        """Test program innovation scales collapse onto eps_mu as eps_sigma -> 0."""
        model = HierarchicalModel(programs, ModelKind.RANDOM_WALK)
        values = model.space.constrain(model.initial_point(rng))
        values.update(log_eps_sigma=-40.0, eps_z_g1=0.0)
        generated = model.generated_quantities(values)
        assert generated['log_eps_g1'] == pytest.approx(values['eps_mu'], abs=1e-12)
        assert generated['log_eps_g2'] == pytest.approx(values['eps_mu'], abs=1e-12)

        # eps_z_g1 then only enters through its standard-normal term
        lp, _ = model.log_density_constrained(values)
        lp_moved, _ = model.log_density_constrained({**values, 'eps_z_g1': 2.0})
        assert lp_moved - lp == pytest.approx(-2.0, abs=1e-9)

    def test_program_draws(self):
        """Test the single-program view renames suffixed blocks."""
        s = 6
        hier = DrawMatrix.from_flat({
            'eta_g1': np.zeros((s, 3)), 'fc_gamma_g1': np.ones((s, 2)),
            'log_eps_g1': np.full(s, -1.0), 'eta0_g1': np.zeros(s), 'eps_g1': np.full(s, math.exp(-1.0)),
            'eta_g2': np.ones((s, 3)), 'fc_gamma_g2': np.ones((s, 2)),
            'log_eps_g2': np.full(s, -2.0), 'eta0_g2': np.zeros(s), 'eps_g2': np.full(s, math.exp(-2.0)),
        }, n_chains=2)
        view = program_draws(hier, 2)
        assert set(view.names) == {'eta', 'fc_gamma', 'log_eps', 'eta0', 'eps'}
        np.testing.assert_array_equal(view.flat('log_eps'), -2.0)
        with pytest.raises(KeyError):
            program_draws(hier, 3)


@pytest.mark.unit
@pytest.mark.slow
class TestHierarchicalFit:
    """Test posterior symmetries of sampled hierarchical fits."""

    SAMPLER = SamplerConfig(chains=4, warmup=400, samples=400, seed=5, max_leapfrog=256)
    CONFIG = HierarchicalConfig(measurement_error=False)

    @staticmethod
    def _agree(first, second, first_name, second_name=None):
        second_name = second_name or first_name
        gap = abs(first.flat(first_name).mean() - second.flat(second_name).mean())
        return gap <= 3.0 * math.hypot(mcse(first, first_name), mcse(second, second_name))

    def test_hyperparameters_ignore_program_order(self, me):
        other = MeasurementErrorInput(mean=np.array([0.8, 0.75, 0.9]), sd=np.array([0.02, 0.02, 0.1]))
        programs = [ProgramData('A', me, PREMIUMS), ProgramData('B', other, PREMIUMS * 2)]
        forward = fit_hierarchical(programs, ModelKind.RANDOM_WALK, self.CONFIG, self.SAMPLER)
        backward = fit_hierarchical(programs[::-1], ModelKind.RANDOM_WALK, self.CONFIG,
                                    replace(self.SAMPLER, seed=6))
        for name in ('eps_mu', 'log_eps_sigma', 'eta_mu0', 'log_eta_sigma0'):
            assert self._agree(forward, backward, name), name
        assert self._agree(forward, backward, 'log_eps_g1', 'log_eps_g2')

    def test_identical_programs_get_the_same_scale(self, me):
        programs = [ProgramData('A', me, PREMIUMS), ProgramData('B', me, PREMIUMS)]
        draws = fit_hierarchical(programs, ModelKind.RANDOM_WALK, self.CONFIG, self.SAMPLER)
        assert self._agree(draws, draws, 'log_eps_g1', 'log_eps_g2')


@pytest.mark.unit
class TestDerivePriors:
    """Test plug-in priors from a hierarchical fit."""

    def _hier(self, rng, shift=0.0):
        shape = (2, 2000)
        offsets = np.array([[0.0], [shift]])
        return DrawMatrix(draws={
            'eps_mu': rng.normal(-1.5, 0.1, shape) + offsets,
            'log_eps_sigma': rng.normal(-2.0, 0.1, shape),
            'eps_sigma': np.full(shape, 0.2),
            'eta_mu0': rng.normal(-0.4, 0.1, shape),
            'log_eta_sigma0': rng.normal(-1.0, 0.1, shape),
            'eta_sigma0': np.full(shape, 0.3),
        })

    def test_plug_in_means(self, rng):
        priors = derive_priors(self._hier(rng), inflation=2.0)
        assert priors.log_eps[0] == pytest.approx(-1.5, abs=0.02)
        assert priors.log_eps[1] == pytest.approx(0.4)
        assert priors.eta0 == pytest.approx((-0.4, 0.6), abs=0.02)
        assert priors.fc_gamma == ForecastPriors().fc_gamma

    def test_refuses_unconverged(self, rng):
        with pytest.raises(ConvergenceError):
            derive_priors(self._hier(rng, shift=1.0))

    def test_refuses_single_chain(self, rng):
        hier = self._hier(rng)
        single = DrawMatrix(draws={name: arr[:1] for name, arr in hier.draws.items()})
        with pytest.raises(ConvergenceError):
            derive_priors(single)

    def test_inflation_must_be_positive(self, rng):
        with pytest.raises(ValueError):
            derive_priors(self._hier(rng), inflation=0.0)


@pytest.mark.unit
class TestPredictive:
    """Test predictive distributions and forward forecasts."""

    def test_random_walk_future_moments(self):
        """Test the one-step predictive is Lognormal(eta_N, sqrt(eps^2 + sigma^2))."""
        draws = _forecaster_draws([-0.5, -0.4, -0.3], math.log(0.1), [math.log(0.05), math.log(0.2)])
        pred = predictive_distribution(draws, ModelKind.RANDOM_WALK, PREMIUMS, horizon=2,
                                       premiums_future=[400.0, 400.0])
        sigma2 = 0.05 ** 2 + 0.2 ** 2 / 20.0
        assert pred.accident_years == (1, 2, 3, 4, 5)
        assert pred.n_in_sample == 3
        assert pred.loc[0, 3] == pytest.approx(-0.3)
        assert pred.scale[0, 3] == pytest.approx(math.sqrt(0.01 + sigma2))
        assert pred.scale[0, 4] == pytest.approx(math.sqrt(0.02 + sigma2))
        assert pred.column(4) == 3

    def test_mean_reversion_latent_moments(self):
        draws = _forecaster_draws([0.0, 0.0, 1.0], math.log(0.1), [-20.0, -20.0], mu=0.2, logit_phi=0.0)
        pred = predictive_distribution(draws, ModelKind.MEAN_REVERSION, PREMIUMS, horizon=2,
                                       premiums_future=[1.0, 1.0])
        assert pred.loc[0, 4] == pytest.approx(0.2 + 0.25 * 0.8)
        assert pred.scale[0, 4] == pytest.approx(math.sqrt(0.01 * 1.25), rel=1e-6)

    def test_log_density(self):
        draws = _forecaster_draws([-0.5, -0.4, -0.3], math.log(0.1), [math.log(0.05), math.log(0.2)])
        pred = predictive_distribution(draws, ModelKind.RANDOM_WALK, PREMIUMS)
        expected = stats.lognorm.logpdf(0.7, s=pred.scale[0, 1], scale=math.exp(-0.4))
        assert pred.log_density(0.7, 1)[0] == pytest.approx(expected)
        assert pred.log_density(0.0, 1)[0] == -np.inf
        with pytest.raises(KeyError):
            pred.column(9)

    def test_forecast_matches_predictive(self):
        """Test simulated forecasts against the analytic one-step distribution."""
        s = 200_000
        draws = _forecaster_draws([-0.5, -0.4, -0.3], math.log(0.1), [math.log(0.05), math.log(0.2)], s=s)
        result = forecast(draws, ModelKind.RANDOM_WALK, 1, [400.0], np.random.default_rng(8),
                          triangle_id='T', last_accident_year=2010)
        log_r = np.log(result.loss_ratio[:, 0])
        sd = math.sqrt(0.01 + 0.05 ** 2 + 0.2 ** 2 / 20.0)
        assert log_r.mean() == pytest.approx(-0.3, abs=4 * sd / math.sqrt(s))
        assert log_r.std() == pytest.approx(sd, rel=0.01)
        assert result.accident_years == (2011,)
        np.testing.assert_allclose(result.loss[:, 0], result.loss_ratio[:, 0] * 400.0)

    def test_forecast_validation(self):
        draws = _forecaster_draws([-0.5], -2.0, [-2.0, -2.0])
        with pytest.raises(ConfigError):
            forecast(draws, ModelKind.RANDOM_WALK, 0, None, np.random.default_rng(0), np.ones(1))
        with pytest.raises(DataValidationError):
            forecast(draws, ModelKind.RANDOM_WALK, 2, [1.0], np.random.default_rng(0), np.ones(1))
        with pytest.raises(DataValidationError):
            forecast(draws, ModelKind.RANDOM_WALK, 1, None, np.random.default_rng(0))

    def test_last_premium_fallback(self, caplog):
        draws = _forecaster_draws([-0.5, -0.4, -0.3], -2.0, [-2.0, -2.0], s=4)
        with caplog.at_level(logging.WARNING):
            result = forecast(draws, ModelKind.RANDOM_WALK, 2, None, np.random.default_rng(0),
                              premiums_history=PREMIUMS)
        np.testing.assert_array_equal(result.premiums, [150.0, 150.0])
        assert 'last observed premium' in caplog.text

    def test_csv_round_trip(self, tmp_path):
        ratios = np.random.default_rng(1).lognormal(-0.4, 0.1, size=(20, 2))
        fd = ForecastDraws('T', (11, 12), ratios, np.array([100.0, 110.0]))
        fd.to_csv(tmp_path / 'f.csv')
        back = read_forecast_draws(tmp_path / 'f.csv')['T']
        assert back.accident_years == (11, 12)
        np.testing.assert_allclose(back.loss_ratio, ratios, rtol=1e-15)
        np.testing.assert_allclose(back.premiums, [100.0, 110.0], rtol=1e-12)
