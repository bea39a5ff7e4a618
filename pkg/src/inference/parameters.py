"""
Parameter Space
Named parameter layout with unconstrained <-> constrained transforms.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
from scipy.special import expit, logit


class Constraint(Enum):
    """Support of a parameter and the transform that maps R onto it."""
    REAL = "real"
    POSITIVE = "positive"            # x = exp(z)
    UNIT_INTERVAL = "unit_interval"  # x = logistic(z)
    LOWER_BOUND_ONE = "lower_one"    # x = 1 + exp(z)


@dataclass(frozen=True)
class ParameterSpec:
    """A named block of the parameter vector."""
    name: str
    size: int = 1
    constraint: Constraint = Constraint.REAL
    scalar: bool = True

    @classmethod
    def vector(cls, name: str, size: int, constraint: Constraint = Constraint.REAL) -> 'ParameterSpec':
        return cls(name=name, size=size, constraint=constraint, scalar=False)


class ParameterSpace:
    """
    Ordered collection of parameter blocks.

    Constrained values are exchanged as ``{name: float | ndarray}``; the
    unconstrained vector is the concatenation of the blocks in declaration
    order.
    """

    def __init__(self, specs: Sequence[ParameterSpec]):
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError(f"Duplicate parameter names: {names}")
        self.specs: Tuple[ParameterSpec, ...] = tuple(specs)
        self._slices: Dict[str, slice] = {}
        offset = 0
        for spec in self.specs:
            self._slices[spec.name] = slice(offset, offset + spec.size)
            offset += spec.size
        self.dim = offset

    def __iter__(self) -> Iterator[ParameterSpec]:
        return iter(self.specs)

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    @property
    def names(self) -> List[str]:
        return [s.name for s in self.specs]

    def spec(self, name: str) -> ParameterSpec:
        return self.specs[self.names.index(name)]

    def block(self, name: str) -> slice:
        return self._slices[name]

    def constrain(self, z: np.ndarray) -> Dict[str, object]:
        """Map an unconstrained vector to named constrained values."""
        values: Dict[str, object] = {}
        for spec in self.specs:
            x = _forward(z[self._slices[spec.name]], spec.constraint)
            values[spec.name] = float(x[0]) if spec.scalar else x
        return values

    def unconstrain(self, values: Dict[str, object]) -> np.ndarray:
        """Map named constrained values back to the unconstrained vector."""
        z = np.empty(self.dim)
        for spec in self.specs:
            x = np.atleast_1d(np.asarray(values[spec.name], dtype=float))
            if x.size != spec.size:
                raise ValueError(f"Parameter {spec.name} expects {spec.size} values, got {x.size}")
            z[self._slices[spec.name]] = _inverse(x, spec.constraint)
        return z

    def log_jacobian(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        """log |d constrain / dz| and its gradient with respect to z."""
        total = 0.0
        grad = np.zeros(self.dim)
        for spec in self.specs:
            sl = self._slices[spec.name]
            value, g = _log_jacobian(z[sl], spec.constraint)
            total += value
            grad[sl] = g
        return total, grad

    def chain_rule(self, z: np.ndarray, grad_constrained: Dict[str, object]) -> np.ndarray:
        """Convert a gradient over constrained values into one over z."""
        grad = np.zeros(self.dim)
        for spec in self.specs:
            sl = self._slices[spec.name]
            g = np.atleast_1d(np.asarray(grad_constrained.get(spec.name, 0.0), dtype=float))
            grad[sl] = g * _derivative(z[sl], spec.constraint)
        return grad

    def flatten(self, values: Dict[str, object]) -> np.ndarray:
        """Concatenate constrained values in block order (no transform)."""
        return np.concatenate([
            np.atleast_1d(np.asarray(values[s.name], dtype=float)) for s in self.specs
        ])

    def scalar_labels(self) -> List[str]:
        labels = []
        for spec in self.specs:
            if spec.scalar:
                labels.append(spec.name)
            else:
                labels.extend(f"{spec.name}[{k}]" for k in range(1, spec.size + 1))
        return labels


def _forward(z: np.ndarray, kind: Constraint) -> np.ndarray:
    if kind is Constraint.REAL:
        return np.array(z, dtype=float)
    if kind is Constraint.POSITIVE:
        return np.exp(z)
    if kind is Constraint.UNIT_INTERVAL:
        return expit(z)
    return 1.0 + np.exp(z)


def _inverse(x: np.ndarray, kind: Constraint) -> np.ndarray:
    if kind is Constraint.REAL:
        return np.array(x, dtype=float)
    if kind is Constraint.POSITIVE:
        return np.log(x)
    if kind is Constraint.UNIT_INTERVAL:
        return logit(x)
    return np.log(x - 1.0)


def _derivative(z: np.ndarray, kind: Constraint) -> np.ndarray:
    if kind is Constraint.REAL:
        return np.ones_like(z, dtype=float)
    if kind is Constraint.UNIT_INTERVAL:
        p = expit(z)
        return p * (1.0 - p)
    return np.exp(z)


def _log_jacobian(z: np.ndarray, kind: Constraint) -> Tuple[float, np.ndarray]:
    if kind is Constraint.REAL:
        return 0.0, np.zeros_like(z, dtype=float)
    if kind is Constraint.UNIT_INTERVAL:
        p = expit(z)
        # log p + log(1 - p) = -softplus(-z) - softplus(z)
        value = -np.logaddexp(0.0, -z) - np.logaddexp(0.0, z)
        return float(value.sum()), 1.0 - 2.0 * p
    return float(np.sum(z)), np.ones_like(z, dtype=float)
