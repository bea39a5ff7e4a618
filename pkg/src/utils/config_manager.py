"""
Configuration Manager
Loads, validates, merges and serializes the single YAML run configuration.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.inference.sampler import SamplerConfig
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

PRIOR_SCALES = (0.5, 1.0, 2.0)


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class PathsConfig(_Section):
    corpus: Path = Path('data/triangles.csv')
    output_dir: Path = Path('output')
    premiums_future: Optional[Path] = None


class SamplerSettings(_Section):
    chains: int = Field(4, ge=1)
    warmup: int = Field(1000, ge=1)
    samples: int = Field(1000, ge=1)
    target_accept: float = Field(0.8, gt=0.0, lt=1.0)
    max_leapfrog: int = Field(1024, ge=1)
    integration_time: float = Field(2.0, gt=0.0)
    check_gradients: bool = True

    def to_sampler(self, seed: int, workers: int = 1) -> SamplerConfig:
        return SamplerConfig(
            chains=self.chains, warmup=self.warmup, samples=self.samples,
            target_accept=self.target_accept, max_leapfrog=self.max_leapfrog,
            integration_time=self.integration_time, seed=seed, workers=workers,
            check_gradients=self.check_gradients,
        )


class LineDevSettings(_Section):
    tau: int = Field(4, ge=2)
    rho: Tuple[int, int] = (5, 10)
    j_max: Optional[int] = None

    @field_validator('rho')
    @classmethod
    def _rho_order(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if not 2 <= value[0] < value[1]:
            raise ValueError('rho must satisfy 2 <= rho1 < rho2')
        return value


def _default_lines() -> Dict[str, LineDevSettings]:
    return {
        'PP': LineDevSettings(tau=4, rho=(5, 10)),
        'CA': LineDevSettings(tau=4, rho=(5, 10)),
        'WC': LineDevSettings(tau=6, rho=(4, 10)),
        'OO': LineDevSettings(tau=6, rho=(4, 10)),
    }


class ForecastSettings(_Section):
    models: List[Literal['rw', 'mr']] = Field(default_factory=lambda: ['rw', 'mr'])
    hierarchical: bool = True
    measurement_error: bool = True
    horizon: int = Field(3, ge=1)
    # single-program fits take their priors from a hierarchical fit of the line
    derived_priors: bool = False
    prior_inflation: float = Field(1.0, gt=0.0)


class MeasurementPriorSettings(_Section):
    source: Literal['auto', 'explicit'] = 'auto'
    mean: Optional[float] = Field(None, gt=0.0)
    sd: Optional[float] = Field(None, gt=0.0)

    @model_validator(mode='after')
    def _explicit_values(self) -> 'MeasurementPriorSettings':
        if self.source == 'explicit' and (self.mean is None or self.sd is None):
            raise ValueError('explicit measurement prior needs mean and sd')
        return self


class SbcSettings(_Section):
    family: Literal['dev', 'forecast'] = 'dev'
    simulations: int = Field(200, ge=50)
    n_dev_lags: int = Field(8, ge=3)
    tau: int = Field(4, ge=2)
    rho: Tuple[int, int] = (5, 8)
    thin_to: int = Field(100, ge=2)
    bins: int = Field(20, ge=2)
    level: float = Field(0.99, gt=0.0, lt=1.0)
    sigma_scale: float = Field(1.0, gt=0.0)
    forecast_kind: Literal['rw', 'mr'] = 'rw'


class BacktestSettings(_Section):
    test_rows: Optional[List[int]] = None
    failure_threshold: float = Field(0.25, ge=0.0, lt=1.0)
    archive_draws: int = Field(400, ge=1)


class StackSettings(_Section):
    enabled: bool = True
    tol: float = Field(1e-10, gt=0.0)
    max_iter: int = Field(10000, ge=1)
    per_line: bool = False


class CashflowSettings(_Section):
    quantiles: List[float] = Field(default_factory=lambda: [0.05, 0.25, 0.5, 0.75, 0.95])
    model: Literal['rw', 'mr'] = 'rw'

    @field_validator('quantiles')
    @classmethod
    def _in_unit_interval(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError('at least one quantile is required')
        if any(not 0.0 <= q <= 1.0 for q in value):
            raise ValueError('quantiles must lie in [0, 1]')
        return value


class RunConfig(_Section):
    """Every setting of a lossflow run."""
    seed: int = 0
    workers: int = Field(1, ge=1)
    prior_scale: float = 1.0
    loss_scale: Union[float, Literal['auto']] = 'auto'
    paths: PathsConfig = Field(default_factory=PathsConfig)
    sampler: SamplerSettings = Field(default_factory=SamplerSettings)
    lines: Dict[str, LineDevSettings] = Field(default_factory=_default_lines)
    forecast: ForecastSettings = Field(default_factory=ForecastSettings)
    measurement_prior: MeasurementPriorSettings = Field(default_factory=MeasurementPriorSettings)
    sbc: SbcSettings = Field(default_factory=SbcSettings)
    backtest: BacktestSettings = Field(default_factory=BacktestSettings)
    stack: StackSettings = Field(default_factory=StackSettings)
    cashflow: CashflowSettings = Field(default_factory=CashflowSettings)

    @field_validator('prior_scale')
    @classmethod
    def _known_scale(cls, value: float) -> float:
        if value not in PRIOR_SCALES:
            raise ValueError(f'prior_scale must be one of {PRIOR_SCALES}')
        return value

    def line_settings(self, line: str) -> Dict[str, Any]:
        """DevConfig overrides for a line; unknown lines use the PP defaults."""
        settings = self.lines.get(line) or LineDevSettings()
        return settings.model_dump(exclude_none=True)


class EnvSettings(BaseSettings):
    """Environment overrides (``LOSSFLOW_WORKERS``, ``LOSSFLOW_LOG_LEVEL``)."""
    model_config = SettingsConfigDict(env_prefix='LOSSFLOW_', extra='ignore')

    workers: Optional[int] = None
    log_level: str = 'INFO'


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _dotted(overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Expand ``{'sampler.chains': 2}`` into nested mappings."""
    nested: Dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        node = nested
        *parents, leaf = key.split('.')
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


class ConfigManager:
    """Manages the run configuration and its provenance."""

    def __init__(self, config_path: Optional[Union[str, Path]] = None,
                 overrides: Optional[Dict[str, Any]] = None):
        """
        Initialize the configuration manager.

        Args:
            config_path: YAML file; defaults apply when omitted
            overrides: Dotted keys (``'sampler.chains'``) applied after the file
        """
        load_dotenv()
        self.config_path = Path(config_path) if config_path else None
        self.env = EnvSettings()
        raw = self._read(self.config_path) if self.config_path else {}
        if self.env.workers is not None:
            raw = _deep_merge(raw, {'workers': self.env.workers})
        raw = _deep_merge(raw, _dotted(overrides or {}))
        self.config = self.parse(raw)
        logger.debug(f"Loaded configuration (hash {self.config_hash()[:12]})")

    @staticmethod
    def _read(path: Path) -> Dict[str, Any]:
        if not path.exists():
            raise ConfigError(f"Configuration file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {path}", {'error': str(e)}) from e
        if not isinstance(data, dict):
            raise ConfigError(f"Configuration root must be a mapping: {path}")
        return data

    @staticmethod
    def parse(raw: Dict[str, Any]) -> RunConfig:
        try:
            return RunConfig.model_validate(raw)
        except ValidationError as e:
            errors = [{'loc': '.'.join(str(p) for p in err['loc']), 'msg': err['msg']} for err in e.errors()]
            raise ConfigError("Invalid configuration", {'errors': errors}) from e

    def to_dict(self) -> Dict[str, Any]:
        return self.config.model_dump(mode='json')

    def dump(self, path: Optional[Union[str, Path]] = None) -> str:
        """Serialize the merged configuration to YAML (and to ``path`` when given)."""
        text = yaml.safe_dump(self.to_dict(), sort_keys=True)
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding='utf-8')
        return text

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()

    def sampler(self, seed_offset: int = 0) -> SamplerConfig:
        return self.config.sampler.to_sampler(self.config.seed + seed_offset, self.config.workers)
