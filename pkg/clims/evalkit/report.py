# clims/evalkit/report.py
import io
import json
import logging
import math
from pathlib import Path
from typing import Optional, Union

from rich.console import Console
from rich.table import Table

from clims.evalkit.ablation import REFERENCE_CLASS_IOU, AblationTable, SensitivityTable
from clims.evalkit.metrics import EvalSummary

logger = logging.getLogger(__name__)

Report = Union[EvalSummary, AblationTable, SensitivityTable]


def _pct(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{100.0 * value:.1f}"


def _eval_table(summary: EvalSummary) -> Table:
    table = Table(title=f"Initial CAMs (threshold {summary.threshold:.2f}, {summary.num_images} images)")
    table.add_column("class")
    table.add_column("IoU (%)", justify="right")
    for name, iou in summary.report.per_class().items():
        table.add_row(name, _pct(iou))
    table.add_section()
    table.add_row("mIoU", _pct(summary.miou))
    table.add_row("mean area", f"{summary.mean_area:.3f}")
    table.add_row("fg recall", _pct(summary.foreground_recall))
    return table


def _ablation_tables(report: AblationTable) -> list:
    main = Table(title="Loss ablation: initial-CAM mIoU")
    main.add_column("variant")
    main.add_column("mIoU (%)", justify="right")
    main.add_column("threshold", justify="right")
    main.add_column("mean area", justify="right")
    main.add_column("fg recall (%)", justify="right")
    main.add_column("VOC ref (%)", justify="right")
    for row in report.rows:
        s = row.summary
        ref = "-" if row.reference_miou is None else f"{row.reference_miou:.1f}"
        main.add_row(row.variant, _pct(s.miou), f"{s.threshold:.2f}", f"{s.mean_area:.3f}",
                     _pct(s.foreground_recall), ref)
    tables = [main]

    if report.background_classes:
        per_class = Table(title="Classes with co-occurring backgrounds: IoU (%)")
        per_class.add_column("variant")
        for name in report.background_classes:
            per_class.add_column(name, justify="right")
        for variant, values in report.per_class().items():
            per_class.add_row(variant, *[_pct(values[c]) for c in report.background_classes])
        tables.append(per_class)

        reference = Table(title="VOC reference: per-class IoU (%)")
        reference.add_column("variant")
        reference.add_column("boat", justify="right")
        reference.add_column("train", justify="right")
        for variant, values in REFERENCE_CLASS_IOU.items():
            reference.add_row(variant, f"{values['boat']:.1f}", f"{values['train']:.1f}")
        tables.append(reference)
    return tables


def _sensitivity_table(report: SensitivityTable) -> Table:
    lo, hi = report.stable_range
    table = Table(title=f"Sensitivity of {report.parameter} (published stable range {lo:g}-{hi:g})")
    table.add_column(report.parameter, justify="right")
    table.add_column("mIoU (%)", justify="right")
    table.add_column("threshold", justify="right")
    for value, summary in report.rows:
        table.add_row(f"{value:g}", _pct(summary.miou), f"{summary.threshold:.2f}")
    return table


def render_table(report: Report, width: int = 100) -> str:
    if isinstance(report, EvalSummary):
        tables = [_eval_table(report)]
    elif isinstance(report, AblationTable):
        tables = _ablation_tables(report)
    elif isinstance(report, SensitivityTable):
        tables = [_sensitivity_table(report)]
    else:
        raise TypeError(f"Cannot render {type(report).__name__}")

    console = Console(record=True, width=width, highlight=False, color_system=None, file=io.StringIO())
    for table in tables:
        console.print(table)
    return console.export_text()


def write_report(report: Report, out_dir, name: str) -> list[Path]:
    """<name>.json and <name>.txt under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{name}.json"
    text_path = out_dir / f"{name}.txt"
    json_path.write_text(json.dumps(_clean(report.to_dict()), indent=2, sort_keys=True), encoding="utf-8")
    text_path.write_text(render_table(report), encoding="utf-8")
    logger.info(f"Report written: {json_path}")
    return [json_path, text_path]


def _clean(value):
    """NaN is not valid JSON; report it as null."""
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value
