"""
Simulation-Based Calibration
Fits models to datasets simulated from their priors and checks that the rank
of each true value among the posterior draws is uniform.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import binom, chisquare

from src.data.triangle import to_runoff
from src.inference.diagnostics import max_rhat
from src.inference.draws import DrawMatrix
from src.inference.sampler import SamplerConfig, sample
from src.models.development.bondy import BondyModel, BondyParams
from src.models.development.chain_ladder import ChainLadderModel, ChainLadderParams
from src.models.development.config import DevConfig
from src.models.development.fit import fit_development
from src.models.development.simulation import sample_dev_prior, simulate_development
from src.models.forecasting.measurement import MeasurementErrorInput
from src.models.forecasting.state_space import ForecastPriors, ModelKind, StateSpaceModel
from src.utils.errors import ConfigError, LossflowError
from src.utils.parallel import run_jobs
from src.validation.simulators import simulate_forecast_data, simulate_seeds, simulate_triangle

logger = logging.getLogger(__name__)

MIN_SIMULATIONS = 50


class SbcFamily(Enum):
    DEVELOPMENT = "dev"
    FORECAST = "forecast"


def rank_statistic(true_value: float, samples: Sequence[float],
                   rng: Optional[np.random.Generator] = None) -> int:
    """
    Number of samples below the true value.

    Each sample exactly equal to the true value counts as below with
    probability 1/2.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("rank_statistic needs at least one sample")
    below = int(np.sum(samples < true_value))
    ties = int(np.sum(samples == true_value))
    if ties:
        rng = rng or np.random.default_rng(0)
        below += int(rng.binomial(ties, 0.5))
    return below


def uniform_band(n: int, bins: int, level: float = 0.99) -> Tuple[int, int]:
    """Central binomial(n, 1/bins) interval for the count in one histogram bin."""
    if bins < 2:
        raise ValueError(f"Need at least 2 bins, got {bins}")
    if n < bins:
        raise ValueError(f"Need at least as many ranks as bins, got n={n}, bins={bins}")
    tail = (1.0 - level) / 2.0
    lo = binom.ppf(tail, n, 1.0 / bins)
    hi = binom.ppf(1.0 - tail, n, 1.0 / bins)
    return int(lo), int(hi)


def rank_histogram(ranks: Sequence[int], bins: int, max_rank: int) -> np.ndarray:
    """Counts of ranks 0..max_rank in ``bins`` equal-width bins."""
    ranks = np.asarray(ranks, dtype=int)
    index = np.floor(ranks * bins / (max_rank + 1)).astype(int)
    return np.bincount(index, minlength=bins)[:bins]


def chi_square_uniformity(ranks: Sequence[int], bins: int, max_rank: int) -> float:
    """Pearson chi-square p-value for a flat rank histogram."""
    counts = rank_histogram(ranks, bins, max_rank)
    if counts.sum() == 0:
        return float('nan')
    return float(chisquare(counts).pvalue)


@dataclass
class SbcConfig:
    """Settings of one calibration run."""
    family: SbcFamily = SbcFamily.DEVELOPMENT
    n_dev_lags: int = 10
    tau: int = 5
    rho: Tuple[int, int] = (6, 10)
    prior_scale: float = 1.0
    sigma_scale: float = 1.0
    thin_to: int = 400
    bins: int = 20
    level: float = 0.99
    seed_log_mean: float = 0.0
    seed_log_sd: float = 0.5
    max_rhat: float = 1.05
    max_divergence_fraction: float = 0.05
    unreliable_fraction: float = 0.2
    forecast_kind: ModelKind = ModelKind.RANDOM_WALK
    forecast_years: int = 10
    measurement_cv: float = 0.05
    workers: int = 1
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        self.family = SbcFamily(self.family)
        self.forecast_kind = ModelKind(self.forecast_kind)
        self.dev_config().validate_for(self.n_dev_lags)
        if self.bins < 2 or self.thin_to < self.bins:
            raise ConfigError("Need bins >= 2 and thin_to >= bins",
                              {'bins': self.bins, 'thin_to': self.thin_to})

    def dev_config(self, fitting: bool = False) -> DevConfig:
        """Generating config, or the fitting config with sigma_scale applied."""
        return DevConfig(
            tau=self.tau, rho=self.rho, j_max=self.n_dev_lags, prior_scale=self.prior_scale,
            sigma_scale=self.sigma_scale if fitting else 1.0,
        )


@dataclass
class RankRecord:
    quantity: str
    true_value: float
    rank: int
    simulation: int


@dataclass
class SimulationDiagnostics:
    simulation: int
    max_rhat: float
    divergences: int
    divergence_fraction: float
    excluded: bool
    reason: str = ''


@dataclass
class SbcReport:
    """Ranks and diagnostics of a calibration run."""
    family: str
    n_sims: int
    thin_to: int
    bins: int
    level: float
    records: List[RankRecord]
    diagnostics: List[SimulationDiagnostics]
    unreliable_fraction: float = 0.2

    @property
    def retained(self) -> int:
        return sum(not d.excluded for d in self.diagnostics)

    @property
    def excluded(self) -> int:
        return sum(d.excluded for d in self.diagnostics)

    @property
    def unreliable(self) -> bool:
        return self.excluded > self.unreliable_fraction * max(self.n_sims, 1)

    @property
    def quantities(self) -> List[str]:
        return list(dict.fromkeys(r.quantity for r in self.records))

    def ranks(self, quantity: str) -> np.ndarray:
        return np.array([r.rank for r in self.records if r.quantity == quantity], dtype=int)

    def histogram(self, quantity: str) -> np.ndarray:
        return rank_histogram(self.ranks(quantity), self.bins, self.thin_to)

    def band(self) -> Tuple[int, int]:
        return uniform_band(max(self.retained, self.bins), self.bins, self.level)

    def band_violations(self, quantity: str) -> int:
        lo, hi = uniform_band(max(self.ranks(quantity).size, self.bins), self.bins, self.level)
        counts = self.histogram(quantity)
        return int(np.sum((counts < lo) | (counts > hi)))

    def chi_square(self, quantity: str) -> float:
        return chi_square_uniformity(self.ranks(quantity), self.bins, self.thin_to)

    def max_band_violations(self) -> int:
        return max((self.band_violations(q) for q in self.quantities), default=0)

    def calibrated_fraction(self, max_violations: int = 1) -> float:
        """Share of quantities with at most ``max_violations`` bins outside the band."""
        quantities = self.quantities
        if not quantities:
            return float('nan')
        ok = sum(self.band_violations(q) <= max_violations for q in quantities)
        return ok / len(quantities)

    def passes(self, max_violations: int = 1, min_fraction: float = 0.9) -> bool:
        """
        Overall verdict of the run.

        At least ``min_fraction`` of the quantities must keep their band
        violations at or below ``max_violations``. An unreliable run never
        passes.
        """
        if self.unreliable or not self.quantities:
            return False
        return self.calibrated_fraction(max_violations) >= min_fraction

    def summary_frame(self) -> pd.DataFrame:
        rows = []
        for q in self.quantities:
            rows.append({
                'quantity': q,
                'n': int(self.ranks(q).size),
                'band_violations': self.band_violations(q),
                'chi_square_p': self.chi_square(q),
                'histogram': ' '.join(str(c) for c in self.histogram(q)),
            })
        return pd.DataFrame(rows)

    def to_dict(self) -> dict:
        lo, hi = self.band()
        return {
            'family': self.family,
            'n_sims': self.n_sims,
            'retained': self.retained,
            'excluded': self.excluded,
            'unreliable': self.unreliable,
            'thin_to': self.thin_to,
            'bins': self.bins,
            'band': {'level': self.level, 'lo': lo, 'hi': hi},
            'calibrated_fraction': self.calibrated_fraction(),
            'passes': self.passes(),
            'quantities': {
                q: {
                    'histogram': self.histogram(q).tolist(),
                    'band_violations': self.band_violations(q),
                    'chi_square_p': self.chi_square(q),
                }
                for q in self.quantities
            },
            'simulations': [asdict(d) for d in self.diagnostics],
        }

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding='utf-8')
        return path

    def ranks_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records],
                            columns=['quantity', 'true_value', 'rank', 'simulation'])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.ranks_frame().to_csv(path, index=False, float_format='%.17g')
        return path


def thin_to(d: DrawMatrix, n: int) -> DrawMatrix:
    """Thin every chain by a common stride leaving at least ``n`` draws in total."""
    stride = max(1, d.n_draws // n)
    thinned = d.thin(stride)
    if thinned.n_draws < n:
        raise ConfigError(
            "Not enough posterior draws to thin to the requested count",
            {'draws': d.n_draws, 'thin_to': n},
        )
    return thinned


def _first(d: DrawMatrix, label: str, n: int) -> np.ndarray:
    return d.scalar(label).ravel()[:n]


@dataclass
class _Outcome:
    records: List[RankRecord]
    diagnostics: SimulationDiagnostics


def _simulate_dev(cfg: SbcConfig, m: int, seed: int) -> _Outcome:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, m])))
    gen_cfg, fit_cfg = cfg.dev_config(), cfg.dev_config(fitting=True)
    n = cfg.n_dev_lags
    cl, bondy = sample_dev_prior(gen_cfg, rng, n)
    seeds = simulate_seeds(n, rng, cfg.seed_log_mean, cfg.seed_log_sd)
    full = simulate_triangle(cl, bondy, seeds, gen_cfg, rng, n, triangle_id=f'sbc-{m}')
    train = to_runoff(full, n)

    fit = fit_development(train, fit_cfg, replace(cfg.sampler, seed=int(seed % (2 ** 31)) + m))
    worst = fit.max_rhat
    diag = SimulationDiagnostics(
        simulation=m, max_rhat=worst, divergences=fit.divergences,
        divergence_fraction=fit.divergence_fraction, excluded=False,
    )
    if worst > cfg.max_rhat or fit.divergence_fraction > cfg.max_divergence_fraction:
        diag.excluded = True
        diag.reason = 'rhat' if worst > cfg.max_rhat else 'divergences'
        return _Outcome(records=[], diagnostics=diag)

    body = thin_to(fit.body, cfg.thin_to)
    tail = thin_to(fit.tail, cfg.thin_to)
    truth = {**_labelled(cl.to_values()), **_labelled(bondy.to_values())}
    records = []
    for label, true_value in truth.items():
        d = body if label in body or label.split('[')[0] in body else tail
        records.append(RankRecord(label, true_value, rank_statistic(true_value, _first(d, label, cfg.thin_to), rng), m))

    # held-out ultimates, drawn from the posterior predictive of the run-off triangle
    predictive = simulate_development(body, tail, train, fit_cfg, rng, keep_paths=False)
    for i in range(2, n + 1):
        samples = predictive.draws[:cfg.thin_to, i - 1]
        records.append(RankRecord(f'ultimate[{i}]', float(full.losses[i - 1, -1]),
                                  rank_statistic(full.losses[i - 1, -1], samples, rng), m))

    # joint log likelihood of the training data
    body_model, tail_model = ChainLadderModel(train, fit_cfg), BondyModel(train, fit_cfg)
    true_ll = body_model.log_likelihood(cl.to_values()) + tail_model.log_likelihood(bondy.to_values())
    draw_ll = [
        body_model.log_likelihood(_values_at(body, s)) + tail_model.log_likelihood(_values_at(tail, s))
        for s in range(cfg.thin_to)
    ]
    records.append(RankRecord('log_lik', true_ll, rank_statistic(true_ll, draw_ll, rng), m))
    return _Outcome(records=records, diagnostics=diag)


def _labelled(values: dict) -> Dict[str, float]:
    out = {}
    for name, value in values.items():
        arr = np.atleast_1d(np.asarray(value, dtype=float))
        if np.ndim(value) == 0:
            out[name] = float(arr[0])
        else:
            out.update({f'{name}[{k}]': float(v) for k, v in enumerate(arr, start=1)})
    return out


def _values_at(d: DrawMatrix, s: int) -> dict:
    return {name: d.flat(name)[s] for name in d.names}


def _simulate_forecast(cfg: SbcConfig, m: int, seed: int) -> _Outcome:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, m])))
    priors = ForecastPriors().scaled(cfg.prior_scale)
    premiums = np.full(cfg.forecast_years, 1.0)
    truth = simulate_forecast_data(cfg.forecast_kind, priors, premiums, rng, cfg.measurement_cv)
    # the latent-ratio prior is not part of the generative process
    me = MeasurementErrorInput(mean=truth.observed_mean, sd=truth.observed_sd, use_prior=False)
    model = StateSpaceModel(cfg.forecast_kind, me, premiums, priors=priors)
    draws = sample(model, replace(cfg.sampler, seed=int(seed % (2 ** 31)) + m))

    worst = max_rhat(draws, model.space.scalar_labels())
    fraction = draws.divergence_fraction()
    diag = SimulationDiagnostics(
        simulation=m, max_rhat=worst, divergences=draws.metadata.total_divergences,
        divergence_fraction=fraction, excluded=False,
    )
    if worst > cfg.max_rhat or fraction > cfg.max_divergence_fraction:
        diag.excluded = True
        diag.reason = 'rhat' if worst > cfg.max_rhat else 'divergences'
        return _Outcome(records=[], diagnostics=diag)

    thinned = thin_to(draws, cfg.thin_to)
    p = truth.params
    values = {'eta': p.eta, 'eta0': p.eta0, 'log_eps': p.log_eps, 'fc_gamma': p.fc_gamma, 'r_true': truth.r_true}
    if cfg.forecast_kind is ModelKind.MEAN_REVERSION:
        values.update(mu=p.mu, logit_phi=p.logit_phi)
    records = [
        RankRecord(label, v, rank_statistic(v, _first(thinned, label, cfg.thin_to), rng), m)
        for label, v in _labelled(values).items()
    ]
    return _Outcome(records=records, diagnostics=diag)


def _run_one(family: SbcFamily, cfg: SbcConfig, m: int, seed: int) -> _Outcome:
    simulate = _simulate_dev if family is SbcFamily.DEVELOPMENT else _simulate_forecast
    try:
        return simulate(cfg, m, seed)
    except LossflowError as e:
        logger.error(f"SBC simulation {m} failed: {e}")
        return _Outcome(records=[], diagnostics=SimulationDiagnostics(
            simulation=m, max_rhat=float('nan'), divergences=0, divergence_fraction=0.0,
            excluded=True, reason=f'error: {e.message}',
        ))


def run_sbc(family: SbcFamily, cfg: SbcConfig, n_sims: int, rng: np.random.Generator) -> SbcReport:
    """
    Simulation-based calibration of a model family.

    Args:
        family: Development models or a forecaster
        cfg: Calibration settings
        n_sims: Number of simulated datasets (>= 50)
        rng: Source of the per-simulation seeds

    Returns:
        SbcReport; ``unreliable`` is set when more than 20% of fits are excluded
    """
    if n_sims < MIN_SIMULATIONS:
        raise ConfigError(f"SBC needs at least {MIN_SIMULATIONS} simulations", {'n_sims': n_sims})
    if cfg.sampler.chains * cfg.sampler.samples < cfg.thin_to:
        raise ConfigError("thin_to exceeds the number of posterior draws",
                          {'thin_to': cfg.thin_to, 'draws': cfg.sampler.chains * cfg.sampler.samples})
    seeds = rng.integers(0, 2 ** 62, size=n_sims)
    logger.info(f"Running SBC for {family.value}: {n_sims} simulations, thin to {cfg.thin_to}")
    jobs = [(family, cfg, m, int(seeds[m])) for m in range(n_sims)]
    outcomes = run_jobs(_run_one, jobs, cfg.workers)

    report = SbcReport(
        family=family.value, n_sims=n_sims, thin_to=cfg.thin_to, bins=cfg.bins, level=cfg.level,
        records=[r for o in outcomes for r in o.records],
        diagnostics=[o.diagnostics for o in outcomes],
        unreliable_fraction=cfg.unreliable_fraction,
    )
    if report.unreliable:
        logger.warning(f"SBC flagged unreliable: {report.excluded} of {n_sims} simulations excluded")
    else:
        logger.info(f"SBC finished: {report.retained} retained, {report.excluded} excluded, "
                    f"{report.calibrated_fraction():.0%} of quantities within the band")
    return report
