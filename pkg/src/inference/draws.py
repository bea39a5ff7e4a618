"""
Draw Matrix
Posterior (or prior) draws organised as chains x iterations x named quantities.
"""

import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.utils.errors import DataValidationError

_LABEL = re.compile(r'^(?P<name>[^\[\]]+)(\[(?P<index>\d+)\])?$')


@dataclass
class SamplerMetadata:
    """Per-run sampler bookkeeping."""
    seed: Optional[int] = None
    divergences: List[int] = field(default_factory=list)
    step_sizes: List[float] = field(default_factory=list)
    mean_accept: List[float] = field(default_factory=list)
    mean_leapfrog: List[float] = field(default_factory=list)
    warmup: int = 0
    thin: int = 1
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def total_divergences(self) -> int:
        return int(sum(self.divergences))


@dataclass
class DrawMatrix:
    """
    Named draws on the constrained scale.

    Each entry of ``draws`` has shape (chains, iterations) for scalars or
    (chains, iterations, k) for vector quantities.
    """
    draws: Dict[str, np.ndarray]
    metadata: SamplerMetadata = field(default_factory=SamplerMetadata)

    def __post_init__(self):
        shapes = {name: np.shape(v)[:2] for name, v in self.draws.items()}
        if len(set(shapes.values())) > 1:
            raise DataValidationError("Draw blocks disagree on chains x iterations", shapes)
        self.draws = {name: np.asarray(v, dtype=float) for name, v in self.draws.items()}

    @classmethod
    def from_flat(
        cls,
        flat: Dict[str, np.ndarray],
        n_chains: int = 1,
        metadata: Optional[SamplerMetadata] = None,
    ) -> 'DrawMatrix':
        """Build from (total_draws, ...) arrays split evenly across chains."""
        draws = {}
        for name, value in flat.items():
            arr = np.asarray(value, dtype=float)
            if arr.shape[0] % n_chains:
                raise DataValidationError(
                    "Draw count is not divisible by the number of chains",
                    {'name': name, 'draws': arr.shape[0], 'chains': n_chains},
                )
            draws[name] = arr.reshape((n_chains, arr.shape[0] // n_chains) + arr.shape[1:])
        return cls(draws=draws, metadata=metadata or SamplerMetadata())

    @property
    def names(self) -> List[str]:
        return list(self.draws)

    @property
    def n_chains(self) -> int:
        return next(iter(self.draws.values())).shape[0]

    @property
    def n_iterations(self) -> int:
        return next(iter(self.draws.values())).shape[1]

    @property
    def n_draws(self) -> int:
        return self.n_chains * self.n_iterations

    def __contains__(self, name: str) -> bool:
        return name in self.draws

    def get(self, name: str) -> np.ndarray:
        return self.draws[name]

    def flat(self, name: str) -> np.ndarray:
        """All draws of a block stacked chain by chain: (total_draws, ...)."""
        arr = self.draws[name]
        return arr.reshape((self.n_draws,) + arr.shape[2:])

    def scalar(self, label: str) -> np.ndarray:
        """(chains, iterations) draws for a scalar label such as ``log_alpha[2]``."""
        match = _LABEL.match(label)
        if match is None or match.group('name') not in self.draws:
            raise KeyError(f"Unknown quantity: {label}")
        arr = self.draws[match.group('name')]
        if match.group('index') is None:
            if arr.ndim != 2:
                raise KeyError(f"{label} is a vector; index it as {label}[k]")
            return arr
        k = int(match.group('index'))
        if arr.ndim != 3 or not 1 <= k <= arr.shape[2]:
            raise KeyError(f"Index out of range: {label}")
        return arr[:, :, k - 1]

    def scalar_labels(self) -> List[str]:
        labels = []
        for name, arr in self.draws.items():
            if arr.ndim == 2:
                labels.append(name)
            else:
                labels.extend(f"{name}[{k}]" for k in range(1, arr.shape[2] + 1))
        return labels

    def divergence_fraction(self) -> float:
        return self.metadata.total_divergences / max(self.n_draws, 1)

    def thin(self, k: int) -> 'DrawMatrix':
        """Keep every k-th draw of each chain."""
        if k < 1:
            raise ValueError(f"Thinning stride must be >= 1, got {k}")
        if k > self.n_iterations:
            raise ValueError(
                f"Thinning stride {k} exceeds draws per chain ({self.n_iterations})"
            )
        offset = k - 1
        thinned = {name: arr[:, offset::k] for name, arr in self.draws.items()}
        meta = replace(self.metadata, thin=self.metadata.thin * k)
        return DrawMatrix(draws=thinned, metadata=meta)

    def merge(self, other: 'DrawMatrix') -> 'DrawMatrix':
        """Add another matrix's blocks (same chains x iterations)."""
        return DrawMatrix(draws={**self.draws, **other.draws}, metadata=self.metadata)

    def to_frame(self) -> pd.DataFrame:
        """Long format: chain, iter, name, value."""
        chains, iters = np.meshgrid(
            np.arange(self.n_chains), np.arange(self.n_iterations), indexing='ij'
        )
        pieces = []
        for label in self.scalar_labels():
            pieces.append(pd.DataFrame({
                'chain': chains.ravel(),
                'iter': iters.ravel(),
                'name': label,
                'value': self.scalar(label).ravel(),
            }))
        return pd.concat(pieces, ignore_index=True)

    def to_csv(self, path: Union[str, Path]) -> Tuple[Path, Path]:
        """Write the columnar CSV and its JSON metadata sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.17g')
        sidecar = path.with_suffix('.json')
        payload = {
            'metadata': asdict(self.metadata),
            'shapes': {name: list(arr.shape[2:]) for name, arr in self.draws.items()},
        }
        sidecar.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding='utf-8')
        return path, sidecar

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> 'DrawMatrix':
        path = Path(path)
        frame = pd.read_csv(path)
        sidecar = path.with_suffix('.json')
        payload = json.loads(sidecar.read_text(encoding='utf-8')) if sidecar.exists() else {}
        shapes = payload.get('shapes', {})
        n_chains = int(frame['chain'].max()) + 1
        n_iter = int(frame['iter'].max()) + 1

        blocks: Dict[str, Dict[int, np.ndarray]] = {}
        for label, group in frame.groupby('name', sort=False):
            match = _LABEL.match(str(label))
            values = np.empty((n_chains, n_iter))
            values[group['chain'].to_numpy(), group['iter'].to_numpy()] = group['value'].to_numpy()
            index = match.group('index')
            blocks.setdefault(match.group('name'), {})[int(index) if index else 0] = values

        draws = {}
        for name, parts in blocks.items():
            if shapes.get(name) or 0 not in parts:
                ordered = [parts[k] for k in sorted(parts)]
                draws[name] = np.stack(ordered, axis=-1)
            else:
                draws[name] = parts[0]
        meta = SamplerMetadata(**payload['metadata']) if 'metadata' in payload else SamplerMetadata()
        return cls(draws=draws, metadata=meta)

    def summary(self, quantiles: Tuple[float, ...] = (0.05, 0.5, 0.95)) -> pd.DataFrame:
        """Mean, sd, quantiles, split R-hat and ESS per scalar quantity."""
        from src.inference.diagnostics import ess, rhat
        from src.utils.errors import UndefinedDiagnosticError

        rows = []
        for label in self.scalar_labels():
            values = self.scalar(label)
            row: Dict[str, Any] = {
                'name': label,
                'mean': float(values.mean()),
                'sd': float(values.std(ddof=1)) if values.size > 1 else 0.0,
            }
            for q in quantiles:
                row[f"q{int(round(q * 100))}"] = float(np.quantile(values, q))
            try:
                row['rhat'] = rhat(self, label)
                row['ess'] = ess(self, label)
            except (UndefinedDiagnosticError, ValueError):
                row['rhat'] = float('nan')
                row['ess'] = float('nan')
            rows.append(row)
        return pd.DataFrame(rows)
