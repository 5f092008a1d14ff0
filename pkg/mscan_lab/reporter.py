"""
Reporting module for mscan_lab.

Writes metric reports, ablation grids, sweep curves and training reports as
JSON or CSV, and formats short text summaries for the terminal.
"""

import csv
import json
import logging
from io import StringIO
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from .errors import OutputError

logger = logging.getLogger(__name__)

FORMATS = ('json', 'csv')


def _document(report: Any) -> Any:
    if hasattr(report, 'to_dict'):
        return report.to_dict()
    if isinstance(report, (list, tuple)):
        return [_document(r) for r in report]
    return report


def _rows(report: Any) -> List[List]:
    if hasattr(report, 'to_rows'):
        return report.to_rows()
    if isinstance(report, pd.DataFrame):
        return [list(report.columns)] + report.values.tolist()
    if isinstance(report, list) and report and isinstance(report[0], (list, tuple)):
        return [list(r) for r in report]
    raise OutputError(f"{type(report).__name__} has no tabular form")


def _cell(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Reporter:
    """Serializes reports and renders text summaries."""

    def __init__(self, out_dir: Optional[Union[str, Path]] = None):
        """
        Initialize reporter.

        Args:
            out_dir: Base directory for relative output paths
        """
        self.out_dir = Path(out_dir) if out_dir else None

    def _resolve(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        if self.out_dir is not None and not path.is_absolute():
            path = self.out_dir / path
        return path

    def render(self, report: Any, fmt: str) -> str:
        """Serialized text of a report with deterministic key order."""
        if fmt == 'json':
            try:
                return json.dumps(_document(report), indent=2, sort_keys=True, allow_nan=False) + '\n'
            except (TypeError, ValueError) as e:
                raise OutputError(f"report is not JSON serializable: {e}")
        if fmt == 'csv':
            lines = []
            for row in _rows(report):
                lines.append([_cell(v) for v in row])
            buf = StringIO()
            csv.writer(buf, lineterminator='\n').writerows(lines)
            return buf.getvalue()
        raise OutputError(f"unknown report format {fmt!r}; expected one of {', '.join(FORMATS)}")

    def emit_report(self, report: Any, fmt: str, path: Union[str, Path]) -> Path:
        """
        Write a report to disk.

        Args:
            report: Object with to_dict()/to_rows(), a DataFrame, or plain data
            fmt: 'json' or 'csv'
            path: Output file

        Returns:
            The written path
        """
        text = self.render(report, fmt)
        path = self._resolve(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8', newline='') as f:
                f.write(text)
        except OSError as e:
            raise OutputError(f"cannot write {path}: {e.strerror or e}", path=str(path))
        logger.info("Wrote %s report to %s", fmt, path)
        return path

    def format_metrics(self, report) -> str:
        """Text table of a MetricsReport."""
        title = f"METRICS: {report.model} ({report.score_kind} scores"
        title += f", c={report.c})" if report.c is not None and report.score_kind == 'db' else ")"
        text = title + "\n" + "=" * 60 + "\n"
        text += f"{'Row':<8} {'N':>8} {'Pos':>7} {'AUC':>8} {'Interest':>9} {'RelImp':>8}\n"
        text += "-" * 60 + "\n"
        for key, row in report.rows.items():
            gain = report.rel_impr.get(key)
            text += (f"{key:<8} {row.n:>8} {row.positives:>7} {_fmt(row.auc):>8} "
                     f"{_fmt(row.interest_auc):>9} {_fmt(gain, '{:+.2f}%'):>8}\n")
        if report.baseline:
            text += f"\nRelImp against: {report.baseline}\n"
        return text

    def format_train(self, report) -> str:
        text = "TRAINING\n" + "=" * 60 + "\n"
        for k, e in enumerate(report.epochs, 1):
            text += f"Epoch {k:<3} L_uis={e.l_uis:.6f}  L_s={e.l_s:.6f}  L_final={e.l_final:.6f}\n"
        text += f"\nSteps: {report.steps}\nChecksum: {report.checksum}\n"
        return text

    def format_ablation(self, summary: pd.DataFrame) -> str:
        text = "ABLATION (mean over seeds)\n" + "=" * 60 + "\n"
        text += f"{'Variant':<18} {'AUC':>8} {'Interest AUC':>13} {'Seeds':>6}\n"
        text += "-" * 60 + "\n"
        for row in summary.itertuples(index=False):
            text += (f"{row.variant:<18} {_fmt(row.mean_auc):>8} "
                     f"{_fmt(row.mean_interest_auc):>13} {int(row.seeds_ok):>6}\n")
        return text

    def format_sweep(self, curve) -> str:
        text = f"SWEEP over {curve.hyper} ({curve.metric}, {len(curve.seeds)} seed(s))\n" + "=" * 60 + "\n"
        for value, mean in zip(curve.grid, curve.mean):
            text += f"{curve.hyper}={value:<8g} {_fmt(mean)}\n"
        if curve.errors:
            text += f"\n{len(curve.errors)} point(s) failed\n"
        return text

    def format_gradcheck(self, report) -> str:
        text = "GRADIENT CHECK\n" + "=" * 60 + "\n"
        text += f"Entries checked: {len(report.entries)}\n"
        text += f"Max relative error: {report.max_rel_error:.3e} (tolerance {report.tolerance:g})\n"
        text += f"Result: {'PASS' if report.passed else 'FAIL'}\n"
        for e in report.flagged[:10]:
            text += f"  {e.name}[{e.index}] analytic={e.analytic:.6e} numeric={e.numeric:.6e}\n"
        return text

    def format_dataset(self, summary: pd.DataFrame, title: str) -> str:
        text = f"{title}\n" + "=" * 60 + "\n"
        text += summary.to_string(float_format=lambda v: f"{v:.4f}") + "\n"
        return text

    def format_runs(self, runs: Sequence[Dict]) -> str:
        if not runs:
            return "No runs recorded yet.\n"
        text = f"\n{len(runs)} run(s):\n\n"
        text += f"{'ID':<5} {'Command':<11} {'Status':<8} {'Exit':<5} {'Metric':<10} {'Run directory'}\n"
        text += "-" * 75 + "\n"
        for r in runs:
            text += (f"{r['id']:<5} {r['command']:<11} {r['status']:<8} {_fmt(r['exit_code'], '{}'):<5} "
                     f"{_fmt(r['headline'], '{:.4f}'):<10} {r['run_dir']}\n")
        return text


def _fmt(value, pattern: str = '{:.4f}') -> str:
    if value is None or (isinstance(value, float) and value != value):
        return 'n/a'
    return pattern.format(value)


def emit_report(report: Any, fmt: str, path: Union[str, Path]) -> Path:
    """Write a report as JSON or CSV with deterministic content."""
    return Reporter().emit_report(report, fmt, path)
