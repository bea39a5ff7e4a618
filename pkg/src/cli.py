"""
Lossflow Command Line
Entry point for the reserving workflow: develop, forecast, sbc, backtest,
stack and cashflow. Flags override keys of the YAML configuration.
"""

from pathlib import Path
from typing import Any, Callable, Dict, Optional

import click
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from src.core.engine.workflow_engine import CommandResult, LossflowEngine
from src.utils.config_manager import PRIOR_SCALES, ConfigManager, EnvSettings
from src.utils.errors import ConfigError, DataValidationError, DependencyMissingError, LossflowError
from src.utils.logger import configure_logging

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

VALIDATION_ERRORS = (DataValidationError, ConfigError, DependencyMissingError, ValidationError)

console = Console(stderr=True)


def _print_result(result: CommandResult) -> None:
    table = Table(title=f"{result.command} ({result.status})", show_lines=False)
    table.add_column('file')
    for path in result.files:
        try:
            table.add_row(str(Path(path).relative_to(result.output_dir)))
        except ValueError:
            table.add_row(str(path))
    console.print(table)
    for failure in result.failures:
        console.print(f"[yellow]failed:[/yellow] {failure}")


def _run(ctx: click.Context, command: str, overrides: Dict[str, Any]) -> None:
    """Build the engine with the merged overrides and run one command."""
    options = ctx.obj
    merged = {**options['overrides'], **overrides}
    try:
        manager = ConfigManager(options['config'], merged)
        engine = LossflowEngine(manager)
        if options['dump_config']:
            manager.dump(Path(manager.config.paths.output_dir) / command / 'config.yaml')
        handler: Callable[[], CommandResult] = getattr(engine, command)
        result = handler()
    except VALIDATION_ERRORS as e:
        _report_error(e)
        ctx.exit(EXIT_VALIDATION)
    except LossflowError as e:
        _report_error(e)
        ctx.exit(EXIT_RUNTIME)
    except Exception as e:
        console.print(f"[red]Unexpected error:[/red] {e!r}")
        ctx.exit(EXIT_RUNTIME)
    _print_result(result)
    ctx.exit(EXIT_OK)


def _report_error(error: Exception) -> None:
    console.print(f"[red]Error:[/red] {error}")
    details = getattr(error, 'details', None)
    if details:
        for key, value in details.items():
            console.print(f"  {key}: {value}")


@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='YAML run configuration')
@click.option('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR')
@click.option('--log-file', type=click.Path(dir_okay=False), default=None)
@click.option('--workers', type=int, default=None, help='Parallel worker processes')
@click.option('--seed', type=int, default=None, help='Master seed')
@click.option('--prior-scale', type=click.Choice([str(s) for s in PRIOR_SCALES]), default=None,
              help='Multiplier on every prior SD')
@click.option('--corpus', type=click.Path(dir_okay=False), default=None, help='Long-format triangle CSV')
@click.option('--output-dir', type=click.Path(file_okay=False), default=None)
@click.option('--dump-config', is_flag=True, help='Write the merged config next to the outputs')
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], log_level: Optional[str], log_file: Optional[str],
        workers: Optional[int], seed: Optional[int], prior_scale: Optional[str], corpus: Optional[str],
        output_dir: Optional[str], dump_config: bool) -> None:
    """Bayesian loss development, forecasting and model comparison."""
    level = log_level or EnvSettings().log_level
    configure_logging(level, Path(log_file) if log_file else None)
    ctx.ensure_object(dict)
    ctx.obj.update(
        config=config_path,
        dump_config=dump_config,
        overrides={
            'workers': workers,
            'seed': seed,
            'prior_scale': float(prior_scale) if prior_scale else None,
            'paths.corpus': corpus,
            'paths.output_dir': output_dir,
        },
    )


@cli.command()
@click.option('--loss-scale', default=None, help="Loss divisor or 'auto'")
@click.pass_context
def develop(ctx: click.Context, loss_scale: Optional[str]) -> None:
    """Fit development models and simulate ultimate loss ratios."""
    _run(ctx, 'develop', {'loss_scale': loss_scale})


@cli.command()
@click.option('--horizon', type=int, default=None, help='Future accident years to forecast')
@click.option('--model', 'models', type=click.Choice(['rw', 'mr']), multiple=True)
@click.option('--hierarchical/--single', default=None)
@click.option('--measurement-error/--no-measurement-error', default=None)
@click.option('--derived-priors/--default-priors', default=None,
              help='Single-program fits use priors from a pooled fit of the line')
@click.option('--premiums-future', type=click.Path(dir_okay=False), default=None)
@click.pass_context
def forecast(ctx: click.Context, horizon: Optional[int], models, hierarchical: Optional[bool],
             measurement_error: Optional[bool], derived_priors: Optional[bool],
             premiums_future: Optional[str]) -> None:
    """Forecast ultimate loss ratios of future accident years."""
    _run(ctx, 'forecast', {
        'forecast.horizon': horizon,
        'forecast.models': list(models) or None,
        'forecast.hierarchical': hierarchical,
        'forecast.measurement_error': measurement_error,
        'forecast.derived_priors': derived_priors,
        'paths.premiums_future': premiums_future,
    })


@cli.command()
@click.option('--family', type=click.Choice(['dev', 'forecast']), default=None)
@click.option('--simulations', type=int, default=None)
@click.option('--sigma-scale', type=float, default=None, help='Scale of the fitted dev-model noise; values other than 1 misspecify the fit')
@click.pass_context
def sbc(ctx: click.Context, family: Optional[str], simulations: Optional[int],
        sigma_scale: Optional[float]) -> None:
    """Simulation-based calibration."""
    _run(ctx, 'sbc', {'sbc.family': family, 'sbc.simulations': simulations, 'sbc.sigma_scale': sigma_scale})


@cli.command()
@click.option('--model', 'models', type=click.Choice(['rw', 'mr']), multiple=True)
@click.pass_context
def backtest(ctx: click.Context, models) -> None:
    """Leave-future-out backtest over the corpus."""
    _run(ctx, 'backtest', {'forecast.models': list(models) or None})


@cli.command()
@click.option('--per-line/--pooled', default=None)
@click.pass_context
def stack(ctx: click.Context, per_line: Optional[bool]) -> None:
    """Fit stacking weights from backtest scores."""
    _run(ctx, 'stack', {'stack.per_line': per_line})


@cli.command()
@click.option('--model', type=click.Choice(['rw', 'mr']), default=None)
@click.pass_context
def cashflow(ctx: click.Context, model: Optional[str]) -> None:
    """Walk forecast ultimates back into paid-loss cashflows."""
    _run(ctx, 'cashflow', {'cashflow.model': model})


def main() -> None:
    cli(obj={})


if __name__ == '__main__':
    main()
