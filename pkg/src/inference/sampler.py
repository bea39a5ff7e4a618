"""
Hamiltonian Monte Carlo Sampler
Static HMC with jittered path length, dual-averaging step-size adaptation and
a diagonal mass matrix estimated in Stan-style warmup windows.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt

from src.inference.diagnostics import check_gradient
from src.inference.draws import DrawMatrix, SamplerMetadata
from src.inference.model import LogDensityModel
from src.utils.errors import ConfigError, ModelEvaluationError, SamplerError
from src.utils.parallel import run_jobs

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0
DIVERGENCE_WARN_FRACTION = 0.10


@dataclass
class SamplerConfig:
    """Sampler settings; defaults follow 4 chains x 1000 warmup x 1000 draws."""
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    target_accept: float = 0.8
    max_leapfrog: int = 1024
    seed: int = 0
    integration_time: float = 2.0
    workers: int = 1
    gradient_tolerance: float = 1e-4
    init_retries: int = 100
    check_gradients: bool = True

    def __post_init__(self):
        for name in ('chains', 'warmup', 'samples', 'max_leapfrog', 'workers', 'init_retries'):
            if getattr(self, name) < 1:
                raise ConfigError(f"Sampler setting {name} must be >= 1", {name: getattr(self, name)})
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must lie in (0, 1)", {'target_accept': self.target_accept})
        if self.integration_time <= 0:
            raise ConfigError("integration_time must be positive")


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Counter-based stream for one chain, independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chain])))


class DualAveraging:
    """Nesterov dual averaging of log step size towards a target acceptance rate."""

    def __init__(self, step_size: float, target: float,
                 gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.h_bar = 0.0
        self.log_step_bar = 0.0
        self.t = 0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob)
        log_step = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        weight = self.t ** (-self.kappa)
        self.log_step_bar = weight * log_step + (1.0 - weight) * self.log_step_bar
        return math.exp(log_step)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.log_step_bar)


def adaptation_windows(warmup: int) -> List[Tuple[int, int]]:
    """Half-open warmup windows [start, end) over which the metric is estimated."""
    if warmup < 20:
        return []
    init_buffer, term_buffer, base = 75, 50, 25
    if init_buffer + term_buffer + base > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base = warmup - init_buffer - term_buffer
    windows = []
    start, size = init_buffer, base
    last = warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start, size = end, size * 2
    return windows


@dataclass
class _ChainResult:
    chain: int
    unconstrained: np.ndarray
    divergences: int
    step_size: float
    mean_accept: float
    mean_leapfrog: float
    inv_metric: np.ndarray = field(repr=False)


def _evaluate(model: LogDensityModel, z: np.ndarray) -> Tuple[float, np.ndarray]:
    try:
        with np.errstate(over='ignore', invalid='ignore', divide='ignore', under='ignore'):
            lp, grad = model.log_density(z)
    except (ModelEvaluationError, FloatingPointError, OverflowError, ZeroDivisionError, ValueError):
        return -np.inf, np.zeros_like(z)
    if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
        return -np.inf, np.zeros_like(z)
    return lp, grad


def _initialize(model: LogDensityModel, rng: np.random.Generator,
                retries: int) -> Tuple[np.ndarray, float, np.ndarray]:
    def attempt_once():
        z = model.initial_point(rng)
        lp, grad = _evaluate(model, z)
        if not np.isfinite(lp):
            raise ModelEvaluationError("Non-finite density at initial point", {'model': model.name})
        return z, lp, grad

    try:
        for attempt in Retrying(stop=stop_after_attempt(retries),
                                retry=retry_if_exception_type(ModelEvaluationError),
                                reraise=True):
            with attempt:
                return attempt_once()
    except (ModelEvaluationError, RetryError) as exc:
        raise SamplerError(
            f"Could not find a finite initial point after {retries} attempts",
            {'model': model.name},
        ) from exc
    raise SamplerError("Initialization loop exited unexpectedly", {'model': model.name})


def _leapfrog(model, z, p, grad, step, n_steps, inv_metric):
    p = p + 0.5 * step * grad
    lp = -np.inf
    for s in range(n_steps):
        z = z + step * inv_metric * p
        lp, grad = _evaluate(model, z)
        if not np.isfinite(lp):
            return z, p, lp, grad
        if s < n_steps - 1:
            p = p + step * grad
    p = p + 0.5 * step * grad
    return z, p, lp, grad


def _transition(model, z, lp, grad, step, n_steps, inv_metric, rng):
    """One HMC transition; returns new state, acceptance probability and divergence flag."""
    p0 = rng.standard_normal(z.size) / np.sqrt(inv_metric)
    h0 = -lp + 0.5 * np.sum(inv_metric * p0 * p0)
    z1, p1, lp1, grad1 = _leapfrog(model, z, p0, grad, step, n_steps, inv_metric)
    h1 = -lp1 + 0.5 * np.sum(inv_metric * p1 * p1) if np.isfinite(lp1) else np.inf
    energy_error = h1 - h0
    divergent = not np.isfinite(energy_error) or energy_error > DIVERGENCE_THRESHOLD
    accept_prob = 0.0 if divergent else float(min(1.0, math.exp(min(0.0, -energy_error))))
    if rng.uniform() < accept_prob:
        return z1, lp1, grad1, accept_prob, divergent
    return z, lp, grad, accept_prob, divergent


def find_reasonable_step_size(model, z, lp, grad, inv_metric, rng, initial: float = 1.0) -> float:
    """Double or halve the step until one leapfrog step crosses 50% acceptance."""
    step = initial

    def accept_prob(eps):
        p0 = rng.standard_normal(z.size) / np.sqrt(inv_metric)
        h0 = -lp + 0.5 * np.sum(inv_metric * p0 * p0)
        _, p1, lp1, _ = _leapfrog(model, z, p0, grad, eps, 1, inv_metric)
        if not np.isfinite(lp1):
            return 0.0
        h1 = -lp1 + 0.5 * np.sum(inv_metric * p1 * p1)
        return math.exp(min(0.0, h0 - h1))

    direction = 1.0 if accept_prob(step) > 0.5 else -1.0
    for _ in range(100):
        a = accept_prob(step)
        if direction > 0 and not a > 0.5:
            break
        if direction < 0 and not a < 0.5:
            break
        step *= 2.0 ** direction
    return float(np.clip(step, 1e-8, 1e3))


def _run_chain(model: LogDensityModel, cfg: SamplerConfig, chain: int) -> _ChainResult:
    rng = chain_rng(cfg.seed, chain)
    z, lp, grad = _initialize(model, rng, cfg.init_retries)
    inv_metric = np.ones(z.size)
    step = find_reasonable_step_size(model, z, lp, grad, inv_metric, rng)
    adapter = DualAveraging(step, cfg.target_accept)

    windows = adaptation_windows(cfg.warmup)
    window_ends = {end for _, end in windows}
    collecting = (windows[0][0], windows[-1][1]) if windows else (0, 0)
    window_samples: List[np.ndarray] = []

    kept = np.empty((cfg.samples, z.size))
    divergences = 0
    accept_total = 0.0
    leapfrog_total = 0

    for it in range(cfg.warmup + cfg.samples):
        n_max = int(np.clip(math.ceil(cfg.integration_time / step), 1, cfg.max_leapfrog))
        n_steps = int(rng.integers(1, n_max + 1))
        z, lp, grad, accept_prob, divergent = _transition(
            model, z, lp, grad, step, n_steps, inv_metric, rng
        )

        if it < cfg.warmup:
            step = adapter.update(accept_prob)
            if collecting[0] <= it < collecting[1]:
                window_samples.append(z.copy())
            if it + 1 in window_ends:
                inv_metric = _regularized_variance(np.array(window_samples))
                window_samples = []
                step = find_reasonable_step_size(model, z, lp, grad, inv_metric, rng, step)
                adapter.restart(step)
            if it + 1 == cfg.warmup:
                step = adapter.final_step_size
                logger.debug(f"{model.name} chain {chain}: adapted step size {step:.4g}")
            continue

        kept[it - cfg.warmup] = z
        divergences += int(divergent)
        accept_total += accept_prob
        leapfrog_total += n_steps

    return _ChainResult(
        chain=chain,
        unconstrained=kept,
        divergences=divergences,
        step_size=step,
        mean_accept=accept_total / cfg.samples,
        mean_leapfrog=leapfrog_total / cfg.samples,
        inv_metric=inv_metric,
    )


def _regularized_variance(samples: np.ndarray) -> np.ndarray:
    n = samples.shape[0]
    if n < 2:
        return np.ones(samples.shape[1])
    var = samples.var(axis=0, ddof=1)
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def sample(model: LogDensityModel, cfg: Optional[SamplerConfig] = None) -> DrawMatrix:
    """
    Run HMC on a model and return constrained draws.

    Args:
        model: Log-density model with exact gradients
        cfg: Sampler settings

    Returns:
        DrawMatrix with one block per parameter plus generated quantities
    """
    cfg = cfg or SamplerConfig()

    if cfg.check_gradients:
        check_rng = chain_rng(cfg.seed, cfg.chains + 1)
        z0, _, _ = _initialize(model, check_rng, cfg.init_retries)
        error = check_gradient(model, z0)
        if error > cfg.gradient_tolerance:
            raise SamplerError(
                "Analytic gradient disagrees with finite differences",
                {'model': model.name, 'max_relative_error': error},
            )

    results = run_jobs(_run_chain, [(model, cfg, c) for c in range(cfg.chains)], cfg.workers)
    results = sorted(results, key=lambda r: r.chain)

    draws = _assemble(model, results)
    metadata = SamplerMetadata(
        seed=cfg.seed,
        divergences=[r.divergences for r in results],
        step_sizes=[r.step_size for r in results],
        mean_accept=[r.mean_accept for r in results],
        mean_leapfrog=[r.mean_leapfrog for r in results],
        warmup=cfg.warmup,
        extra={'model': model.name},
    )
    matrix = DrawMatrix(draws=draws, metadata=metadata)

    fraction = matrix.divergence_fraction()
    if fraction > DIVERGENCE_WARN_FRACTION:
        logger.warning(f"{model.name}: {fraction:.1%} of transitions diverged")
        metadata.extra['divergence_warning'] = True
    logger.info(
        f"{model.name}: {cfg.chains} chains x {cfg.samples} draws, "
        f"{metadata.total_divergences} divergences"
    )
    return matrix


def _assemble(model: LogDensityModel, results: List[_ChainResult]) -> Dict[str, np.ndarray]:
    n_chains = len(results)
    n_iter = results[0].unconstrained.shape[0]
    collected: Dict[str, List[List[object]]] = {}
    for c, result in enumerate(results):
        for row in result.unconstrained:
            values = model.space.constrain(row)
            values.update(model.generated_quantities(values))
            for name, value in values.items():
                collected.setdefault(name, [[] for _ in range(n_chains)])[c].append(value)
    return {
        name: np.asarray(per_chain, dtype=float).reshape(
            (n_chains, n_iter) + np.shape(per_chain[0][0])
        )
        for name, per_chain in collected.items()
    }


def prior_draws(model: LogDensityModel, n_draws: int, rng: np.random.Generator) -> DrawMatrix:
    """Draws from the model's prior packed as a single-chain DrawMatrix."""
    collected: Dict[str, List[object]] = {}
    for _ in range(n_draws):
        values = dict(model.sample_prior(rng))
        values.update(model.generated_quantities(values))
        for name, value in values.items():
            collected.setdefault(name, []).append(value)
    flat = {name: np.asarray(v, dtype=float) for name, v in collected.items()}
    return DrawMatrix.from_flat(flat, n_chains=1, metadata=SamplerMetadata(extra={'prior': True}))
