from clims.evalkit.ablation import VARIANTS, AblationTable, SensitivityTable, ablation_run, sensitivity_run
from clims.evalkit.cams import export_cams, extract_cams, to_pseudo_mask
from clims.evalkit.metrics import (
    ConfusionMatrix,
    EvalSummary,
    IoUReport,
    evaluate_run,
    iou_report,
    sweep_background_threshold,
)
from clims.evalkit.report import render_table, write_report

__all__ = [
    "VARIANTS",
    "AblationTable",
    "ConfusionMatrix",
    "EvalSummary",
    "IoUReport",
    "SensitivityTable",
    "ablation_run",
    "evaluate_run",
    "export_cams",
    "extract_cams",
    "iou_report",
    "render_table",
    "sensitivity_run",
    "sweep_background_threshold",
    "to_pseudo_mask",
    "write_report",
]
