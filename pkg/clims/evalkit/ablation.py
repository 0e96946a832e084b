# clims/evalkit/ablation.py
"""
Loss-combination ablation and single-weight sensitivity sweeps.

Every variant is trained from the same seed on the same data and evaluated
with the same protocol. Published VOC numbers ride along as reference
columns; they are context, not targets.
"""

import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from clims.core.config import LossWeights, TrainConfig
from clims.core.prompts import PromptBook
from clims.evalkit.metrics import EvalSummary, evaluate_run
from clims.exceptions import ConfigError
from clims.pipeline.checkpoint import load_checkpoint, model_from_state
from clims.pipeline.train import train
from clims.pipeline.world import matcher_for, prompt_book_for

logger = logging.getLogger(__name__)

VARIANTS: Dict[str, Tuple[str, ...]] = {
    "CLS-baseline": ("cls",),
    "OTM": ("otm",),
    "OTM+BTM": ("otm", "btm"),
    "OTM+BTM+REG": ("otm", "btm", "reg"),
    "OTM+BTM+CBS": ("otm", "btm", "cbs"),
    "OTM+BTM+REG+CBS": ("otm", "btm", "reg", "cbs"),
}
DEFAULT_VARIANTS = tuple(VARIANTS)

# Initial-CAM mIoU (%) on the VOC 2012 train split
REFERENCE_MIOU = {
    "CLS-baseline": 28.6,
    "OTM": 37.2,
    "OTM+BTM": 41.3,
    "OTM+BTM+REG": 53.1,
    "OTM+BTM+CBS": 45.4,
    "OTM+BTM+REG+CBS": 56.6,
}
# Per-class IoU (%) with and without background suppression
REFERENCE_CLASS_IOU = {
    "OTM+BTM": {"boat": 7.1, "train": 30.7},
    "OTM+BTM+CBS": {"boat": 58.2, "train": 63.9},
}
# Weight ranges over which the full method was reported stable
PUBLISHED_STABLE_RANGES = {
    "alpha": (7.0, 13.0),
    "beta": (22.0, 28.0),
    "gamma": (28.0, 31.0),
    "delta": (1.0, 1.3),
}


def resolve_variants(names: Sequence[str]) -> List[str]:
    lookup = {name.lower(): name for name in VARIANTS}
    lookup["cls"] = "CLS-baseline"
    resolved = []
    for raw in names:
        key = raw.strip().lower()
        if key not in lookup:
            raise ConfigError(f"Unknown ablation variant '{raw}'; expected one of {list(VARIANTS)}")
        resolved.append(lookup[key])
    if not resolved:
        raise ConfigError("At least one ablation variant is required")
    return resolved


@dataclass
class AblationRow:
    variant: str
    losses: Tuple[str, ...]
    summary: EvalSummary
    reference_miou: Optional[float] = None

    @property
    def miou(self) -> float:
        return self.summary.miou

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "losses": list(self.losses),
            "reference_miou": self.reference_miou,
            **self.summary.to_dict(),
        }


@dataclass
class AblationTable:
    rows: List[AblationRow]
    class_names: List[str]
    background_classes: List[str] = field(default_factory=list)

    def row(self, variant: str) -> AblationRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def per_class(self) -> Dict[str, Dict[str, Optional[float]]]:
        """IoU of classes that have class-related backgrounds, per variant."""
        return {r.variant: {c: r.summary.class_iou(c) for c in self.background_classes} for r in self.rows}

    def to_dict(self) -> dict:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "class_names": self.class_names,
            "background_classes": self.background_classes,
            "per_class": self.per_class(),
            "reference_class_iou": REFERENCE_CLASS_IOU,
        }


def run_variant(config: TrainConfig, losses: Sequence[str], dataset, eval_dataset, prompt_book: PromptBook,
                matcher, out_dir: Path, threshold: Optional[float] = None) -> EvalSummary:
    variant_config = config.with_overrides(losses=",".join(losses))
    checkpoint = train(variant_config, dataset, prompt_book, matcher, out_dir)
    model = model_from_state(load_checkpoint(checkpoint))
    head = "cam" if variant_config.objective == "cls" else "sigmoid"
    return evaluate_run(model, eval_dataset, threshold=threshold, head=head)


def ablation_run(
    config: TrainConfig,
    dataset,
    variants: Sequence[str] = DEFAULT_VARIANTS,
    eval_dataset=None,
    prompt_book: Optional[PromptBook] = None,
    matcher=None,
    out_dir=None,
    threshold: Optional[float] = None,
) -> AblationTable:
    variants = resolve_variants(variants)
    eval_dataset = eval_dataset if eval_dataset is not None else dataset.as_eval()
    prompt_book = prompt_book or prompt_book_for(dataset)
    matcher = matcher or matcher_for(dataset)

    with tempfile.TemporaryDirectory(prefix="clims-ablate-") as scratch:
        base = Path(out_dir) if out_dir is not None else Path(scratch)
        rows = []
        for variant in variants:
            losses = VARIANTS[variant]
            logger.info(f"Ablation variant {variant} ({','.join(losses)})")
            summary = run_variant(config, losses, dataset, eval_dataset, prompt_book, matcher,
                                  base / _slug(variant), threshold)
            rows.append(AblationRow(variant, losses, summary, REFERENCE_MIOU.get(variant)))

    background_classes = [name for name, bgs in zip(prompt_book.class_names, prompt_book.background_prompts) if bgs]
    return AblationTable(rows=rows, class_names=list(dataset.class_names), background_classes=background_classes)


# ────────────────────────────────
# Sensitivity
# ────────────────────────────────
@dataclass
class SensitivityTable:
    parameter: str
    rows: List[Tuple[float, EvalSummary]]

    @property
    def stable_range(self) -> Tuple[float, float]:
        return PUBLISHED_STABLE_RANGES[self.parameter]

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "published_stable_range": list(self.stable_range),
            "rows": [{"value": v, **s.to_dict()} for v, s in self.rows],
        }


def sensitivity_run(
    config: TrainConfig,
    dataset,
    parameter: str,
    values: Sequence[float],
    eval_dataset=None,
    prompt_book: Optional[PromptBook] = None,
    matcher=None,
    out_dir=None,
    threshold: Optional[float] = None,
) -> SensitivityTable:
    """Retrain the full method once per value of one loss weight."""
    if parameter not in LossWeights.model_fields:
        raise ConfigError(f"Unknown loss weight '{parameter}'; expected one of {list(LossWeights.model_fields)}")
    if not values:
        raise ConfigError("At least one value is required")
    eval_dataset = eval_dataset if eval_dataset is not None else dataset.as_eval()
    prompt_book = prompt_book or prompt_book_for(dataset)
    matcher = matcher or matcher_for(dataset)
    full = VARIANTS["OTM+BTM+REG+CBS"]

    rows = []
    with tempfile.TemporaryDirectory(prefix="clims-sens-") as scratch:
        base = Path(out_dir) if out_dir is not None else Path(scratch)
        for value in values:
            logger.info(f"Sensitivity {parameter}={value}")
            swept = config.with_overrides(**{parameter: float(value)})
            summary = run_variant(swept, full, dataset, eval_dataset, prompt_book, matcher,
                                  base / f"{parameter}_{value:g}", threshold)
            rows.append((float(value), summary))
    return SensitivityTable(parameter=parameter, rows=rows)


def _slug(variant: str) -> str:
    return variant.lower().replace("+", "_")
