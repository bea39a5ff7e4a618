"""
Report Generator
Renders markdown summaries of backtest comparisons, calibration and stacking
weights from jinja2 templates.
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from jinja2 import Environment, FileSystemLoader, StrictUndefined

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / 'templates'


def _fmt(value: Any, digits: int = 3) -> str:
    if value is None:
        return 'n/a'
    if isinstance(value, float):
        if math.isnan(value):
            return 'n/a'
        if math.isinf(value):
            return '-inf' if value < 0 else 'inf'
        return f'{value:.{digits}f}'
    return str(value)


def _verdict(comparison: Dict[str, Any]) -> str:
    """Whether the ELPD difference exceeds two standard errors."""
    diff, se = comparison.get('elpd_diff'), comparison.get('elpd_se')
    if diff is not None and math.isinf(diff):
        return f"{comparison['model_a' if diff > 0 else 'model_b']} better"
    if diff is None or se is None or math.isnan(se):
        return 'undetermined'
    if diff > 2 * se:
        return f"{comparison['model_a']} better"
    if diff < -2 * se:
        return f"{comparison['model_b']} better"
    return 'no clear difference'


class ReportGenerator:
    """Generates markdown reports for backtest and stacking runs."""

    def __init__(self, template_dir: Optional[Union[str, Path]] = None):
        self.env = Environment(
            loader=FileSystemLoader(str(template_dir or TEMPLATE_DIR)),
            undefined=StrictUndefined,
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=True,
        )
        self.env.filters['fmt'] = _fmt
        self.env.filters['verdict'] = _verdict

    def render_backtest_report(
        self,
        comparisons: Iterable[Dict[str, Any]],
        calibration: Iterable[Dict[str, Any]],
        weights: Optional[Dict[str, Any]] = None,
        aborted_lines: Optional[Dict[str, str]] = None,
        failures: Optional[List[Dict[str, Any]]] = None,
        title: str = 'Backtest report',
    ) -> str:
        """
        Render the backtest summary.

        Args:
            comparisons: Comparison dicts (validation split)
            calibration: Calibration dicts per model
            weights: Stacking weights, flat ``{model: w}`` or per line
            aborted_lines: Line -> reason
            failures: Per-triangle failure rows
            title: Report heading
        """
        if weights and all(isinstance(v, (int, float)) for v in weights.values()):
            weights = {'all lines': weights}
        template = self.env.get_template('backtest_report.md.j2')
        text = template.render(
            title=title,
            comparisons=list(comparisons),
            calibration=list(calibration),
            weights=weights or {},
            aborted_lines=aborted_lines or {},
            failures=failures or [],
        )
        logger.debug(f"Rendered report with {len(text)} characters")
        return text

    def write(self, text: str, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding='utf-8')
        return path


def render_backtest_report(result, weights: Optional[Dict[str, Any]] = None) -> str:
    """Convenience wrapper taking a BacktestResult."""
    return ReportGenerator().render_backtest_report(
        comparisons=[c.to_dict() for c in result.comparisons('validation')],
        calibration=[result.calibration(m) for m in result.models],
        weights=weights,
        aborted_lines=result.aborted_lines,
        failures=result.failures,
    )
