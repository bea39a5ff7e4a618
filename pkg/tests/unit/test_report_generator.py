"""Unit tests for markdown report rendering."""

import math

import pytest

from src.backtest.metrics import ScoreTable
from src.backtest.pipeline import BacktestResult
from src.reporting.generators.report_generator import ReportGenerator, _fmt, _verdict, render_backtest_report


@pytest.fixture
def comparison():
    """One validation comparison"""
    return {'model_a': 'rw', 'model_b': 'mr', 'line': 'PP', 'n': 40, 'elpd_a': -10.0, 'elpd_b': -20.0,
            'elpd_diff': 10.0, 'elpd_se': 3.0, 'rmse_diff': -12.5, 'rmse_se': 4.0, 'split': 'validation'}


@pytest.mark.unit
class TestFilters:
    """Test formatting helpers."""

    def test_fmt(self):
        assert _fmt(1.23456) == '1.235'
        assert _fmt(1.23456, 1) == '1.2'
        assert _fmt(math.nan) == 'n/a'
        assert _fmt(None) == 'n/a'
        assert _fmt(-math.inf) == '-inf'
        assert _fmt(3) == '3'

    def test_verdict(self, comparison):
        assert _verdict(comparison) == 'rw better'
        assert _verdict({**comparison, 'elpd_diff': -10.0}) == 'mr better'
        assert _verdict({**comparison, 'elpd_diff': 5.0}) == 'no clear difference'
        assert _verdict({**comparison, 'elpd_se': math.nan}) == 'undetermined'

    def test_infinite_difference_is_decisive(self, comparison):
        assert _verdict({**comparison, 'elpd_diff': math.inf, 'elpd_se': math.nan}) == 'rw better'
        assert _verdict({**comparison, 'elpd_diff': -math.inf, 'elpd_se': math.nan}) == 'mr better'


@pytest.mark.unit
class TestReportGenerator:
    """Test backtest report rendering."""

    def test_render(self, comparison, tmp_path):
        calibration = [
            {'model': 'rw', 'split': 'validation', 'n': 40, 'counts': [2] * 20, 'band': [0, 6], 'violations': 0},
            {'model': 'mr', 'split': 'validation', 'n': 5, 'counts': [0] * 20, 'band': None, 'violations': None},
        ]
        generator = ReportGenerator()
        text = generator.render_backtest_report(
            [comparison], calibration, weights={'rw': 0.7, 'mr': 0.3},
            aborted_lines={'WC': 'too many failures'},
            failures=[{'line': 'WC', 'triangle_id': 'WC-001', 'stage': 'development', 'error': 'overflow'}],
        )
        assert '| PP | rw | mr | 40 | -10.000 | -20.000 | 10.000 | 3.000 | -12.5 | rw better |' in text
        assert '0 of 20 bins outside the band [0, 6]' in text
        assert 'too few targets for a band test' in text
        assert '| all lines | rw | 0.7000 |' in text
        assert '- WC: too many failures' in text
        assert 'WC-001 (development): overflow' in text
        assert generator.write(text, tmp_path / 'report.md').read_text() == text

    def test_dropped_targets_are_shown(self, comparison):
        text = ReportGenerator().render_backtest_report([{**comparison, 'n_dropped': 3}], [])
        assert '| PP | rw | mr | 40 (3 dropped) |' in text

    def test_optional_sections_are_omitted(self, comparison):
        text = ReportGenerator().render_backtest_report([comparison], [])
        assert 'Stacking weights' not in text
        assert 'Aborted lines' not in text

    def test_per_line_weights(self, comparison):
        text = ReportGenerator().render_backtest_report([comparison], [],
                                                        weights={'PP': {'rw': 0.2, 'mr': 0.8}})
        assert '| PP | mr | 0.8000 |' in text

    def test_from_result(self):
        scores = ScoreTable()
        scores.add('PP', 'T1', 'rw', 'validation', 10, 1.0, -1.0, 0.1, 0.5)
        scores.add('PP', 'T1', 'mr', 'validation', 10, 1.0, -2.0, 0.2, 0.5)
        text = render_backtest_report(BacktestResult(scores=scores))
        assert '| all | rw | mr | 1 |' in text
        assert 'undetermined' in text
