"""
Pytest Configuration and Shared Fixtures
"""

from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest
import yaml

from src.data.triangle import Triangle, to_runoff, write_triangles
from src.inference.sampler import SamplerConfig
from src.models.development.bondy import BondyParams
from src.models.development.chain_ladder import ChainLadderParams
from src.models.development.config import DevConfig
from src.validation.simulators import simulate_random_walk_corpus, simulate_seeds, simulate_triangle


@pytest.fixture
def rng():
    """Seeded generator for reproducible tests"""
    return np.random.default_rng(20240601)


@pytest.fixture
def dev_config():
    """Development settings for 10-lag triangles"""
    return DevConfig(tau=4, rho=(5, 10))


@pytest.fixture
def true_cl():
    """Chain-ladder parameters with a decaying pattern"""
    return ChainLadderParams(
        log_alpha=np.array([0.8, 0.4, 0.2, 0.1, 0.05, 0.03, 0.02, 0.01, 0.005]),
        gamma1=-3.0,
        gamma2=-1.0,
    )


@pytest.fixture
def true_bondy():
    """Bondy tail parameters with a short tail"""
    return BondyParams(log_omega=0.4, logit_beta=-0.5, lambda1=-3.0, lambda2=-1.0)


@pytest.fixture
def full_square(true_cl, true_bondy, dev_config):
    """Simulated 10 x 10 full square with premiums of 2"""
    rng = np.random.default_rng(7)
    seeds = simulate_seeds(10, rng, log_mean=0.0, log_sd=0.3)
    return simulate_triangle(true_cl, true_bondy, seeds, dev_config, rng,
                             triangle_id='PP-001', line='PP', premiums=np.full(10, 2.0))


@pytest.fixture
def runoff(full_square):
    """Standard run-off triangle of the simulated square"""
    return to_runoff(full_square, 10)


@pytest.fixture
def small_triangle():
    """Hand-written 3 x 3 run-off triangle"""
    losses = np.array([
        [100.0, 150.0, 165.0],
        [110.0, 160.0, np.nan],
        [120.0, np.nan, np.nan],
    ])
    return Triangle(triangle_id='T1', line='PP', losses=losses,
                    premiums=np.array([200.0, 210.0, 220.0]), accident_years=(2001, 2002, 2003))


@pytest.fixture
def fast_sampler():
    """Short two-chain run for tests"""
    return SamplerConfig(chains=2, warmup=150, samples=150, seed=11, max_leapfrog=256)


@pytest.fixture
def rw_corpus():
    """Six 6 x 6 random-walk programs on one line"""
    return simulate_random_walk_corpus(6, 6, np.random.default_rng(3), line='PP')


@pytest.fixture
def corpus_csv(tmp_path, rw_corpus) -> Path:
    """Corpus written in the long CSV schema"""
    return write_triangles(rw_corpus[:3], tmp_path / 'triangles.csv')


@pytest.fixture
def run_config(tmp_path, corpus_csv) -> Dict[str, Any]:
    """Small but complete run configuration"""
    return {
        'seed': 1234,
        'workers': 1,
        'prior_scale': 1.0,
        'loss_scale': 'auto',
        'paths': {'corpus': str(corpus_csv), 'output_dir': str(tmp_path / 'out')},
        'sampler': {'chains': 2, 'warmup': 100, 'samples': 100, 'max_leapfrog': 128},
        'lines': {'PP': {'tau': 3, 'rho': [3, 6]}},
        'forecast': {'models': ['rw'], 'horizon': 2},
    }


@pytest.fixture
def config_file(tmp_path, run_config) -> Path:
    """Run configuration written as YAML"""
    path = tmp_path / 'config.yaml'
    path.write_text(yaml.safe_dump(run_config), encoding='utf-8')
    return path
