"""Error types shared across the lossflow package."""

from typing import Any, Dict, Optional


class LossflowError(Exception):
    """Base class for every error raised by lossflow."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details or {}

    def __str__(self) -> str:
        if not self.details:
            return self.message
        extra = ', '.join(f"{k}={v}" for k, v in self.details.items())
        return f"{self.message} ({extra})"


class DataValidationError(LossflowError, ValueError):
    """Input data violates a precondition (shape, positivity, consistency)."""


class ConfigError(LossflowError, ValueError):
    """Configuration is invalid or inconsistent with the data."""


class DependencyMissingError(LossflowError):
    """An upstream artifact required by a command is absent."""


class ModelEvaluationError(LossflowError):
    """A log density or forward simulation produced a non-finite value."""


class SamplerError(LossflowError):
    """The sampler could not initialize or the model failed its gradient check."""


class ConvergenceError(LossflowError):
    """Posterior draws did not pass the required convergence diagnostics."""


class UndefinedDiagnosticError(LossflowError):
    """A diagnostic is undefined for the given draws (e.g. zero variance)."""
