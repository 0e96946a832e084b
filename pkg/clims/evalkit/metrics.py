# clims/evalkit/metrics.py
"""
Integer confusion counting, per-class IoU / mIoU and the background-threshold
sweep. Class 0 is background, 1..K are foreground classes. A class whose
union is empty (absent from both prediction and ground truth) has IoU NaN and
is left out of the mean.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from clims.config import BG_THRESHOLD_GRID
from clims.evalkit.cams import extract_cams, to_pseudo_mask
from clims.exceptions import ShapeError

logger = logging.getLogger(__name__)


def _as_numpy(mask) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask).astype(np.int64)


@dataclass
class IoUReport:
    intersection: np.ndarray  # (K + 1,) int64
    union: np.ndarray  # (K + 1,) int64
    class_names: List[str] = field(default_factory=list)  # foreground names, optional

    @property
    def iou(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)

    @property
    def miou(self) -> float:
        values = self.iou[self.union > 0]
        return float(values.mean()) if values.size else float("nan")

    def per_class(self) -> Dict[str, Optional[float]]:
        names = ["background"] + (self.class_names or [str(k) for k in range(1, len(self.union))])
        return {name: (None if np.isnan(v) else float(v)) for name, v in zip(names, self.iou)}

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": self.per_class(),
            "intersection": self.intersection.tolist(),
            "union": self.union.tolist(),
        }


class ConfusionMatrix:
    """(K + 1) x (K + 1) pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.size = num_classes + 1
        self.counts = np.zeros((self.size, self.size), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = _as_numpy(pred), _as_numpy(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in size")
        for name, m in (("prediction", pred), ("ground truth", gt)):
            if m.size and (m.min() < 0 or m.max() >= self.size):
                raise ShapeError(f"{name} values must lie in [0, {self.size - 1}]")
        flat = gt.ravel() * self.size + pred.ravel()
        self.counts += np.bincount(flat, minlength=self.size ** 2).reshape(self.size, self.size)
        return self

    def report(self, class_names: Sequence[str] = ()) -> IoUReport:
        intersection = np.diag(self.counts).copy()
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - intersection
        return IoUReport(intersection=intersection, union=union, class_names=list(class_names))

    def foreground_recall(self) -> float:
        """Share of ground-truth foreground pixels predicted as their own class."""
        gt_fg = self.counts[1:].sum()
        return float(np.diag(self.counts)[1:].sum() / gt_fg) if gt_fg else float("nan")


def iou_report(pred, gt, num_classes: int, class_names: Sequence[str] = ()) -> IoUReport:
    return ConfusionMatrix(num_classes).update(pred, gt).report(class_names)


def sweep_background_threshold(
    cams_set: Sequence[torch.Tensor],
    gt_set: Sequence,
    grid: Iterable[float] = BG_THRESHOLD_GRID,
) -> Tuple[float, List[Tuple[float, float]]]:
    """Best threshold by dataset-level mIoU (ties -> lower threshold) and the (threshold, mIoU) curve."""
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("Threshold grid must not be empty")
    if any(not 0 < t < 1 for t in grid):
        raise ValueError(f"Thresholds must lie in (0, 1), got {grid}")
    if len(cams_set) != len(gt_set):
        raise ShapeError(f"{len(cams_set)} CAM sets but {len(gt_set)} ground-truth masks")
    if not cams_set:
        raise ValueError("Nothing to evaluate")

    num_classes = cams_set[0].shape[-3]
    curve = []
    for threshold in grid:
        confusion = ConfusionMatrix(num_classes)
        for cams, gt in zip(cams_set, gt_set):
            confusion.update(to_pseudo_mask(cams, threshold), gt)
        curve.append((threshold, confusion.report().miou))

    best = min(curve, key=lambda point: (-point[1], point[0]))[0]
    return best, curve


# ────────────────────────────────
# Dataset-level evaluation
# ────────────────────────────────
@dataclass
class EvalSummary:
    threshold: float
    report: IoUReport
    curve: List[Tuple[float, float]]
    mean_area: float
    foreground_recall: float
    num_images: int

    @property
    def miou(self) -> float:
        return self.report.miou

    def class_iou(self, name: str) -> Optional[float]:
        return self.report.per_class().get(name)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "miou": self.miou,
            "per_class_iou": self.report.per_class(),
            "mean_area": self.mean_area,
            "foreground_recall": self.foreground_recall,
            "num_images": self.num_images,
            "curve": [{"threshold": t, "miou": m} for t, m in self.curve],
            "intersection": self.report.intersection.tolist(),
            "union": self.report.union.tolist(),
        }


def collect_cams(model, dataset, head: str = "sigmoid", batch_size: int = 32) -> List[torch.Tensor]:
    cams = []
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        cams.extend(extract_cams(model, images, labels, head=head).unbind(0))
    return cams


def evaluate_cams(cams: Sequence[torch.Tensor], dataset, threshold: Optional[float] = None,
                  grid: Iterable[float] = BG_THRESHOLD_GRID) -> EvalSummary:
    masks = dataset.masks
    gt_set = list(masks.unbind(0))
    if threshold is None:
        threshold, curve = sweep_background_threshold(cams, gt_set, grid)
    else:
        curve = []

    confusion = ConfusionMatrix(dataset.num_classes)
    for c, gt in zip(cams, gt_set):
        confusion.update(to_pseudo_mask(c, threshold), gt)
    if not curve:
        curve = [(threshold, confusion.report().miou)]

    labels = dataset.labels
    positive = labels > 0
    if positive.any():
        areas = torch.stack([c.mean(dim=(-2, -1)) for c in cams])  # (N, K)
        mean_area = float(areas[positive].mean())
    else:
        mean_area = 0.0

    summary = EvalSummary(
        threshold=threshold,
        report=confusion.report(dataset.class_names),
        curve=curve,
        mean_area=mean_area,
        foreground_recall=confusion.foreground_recall(),
        num_images=len(cams),
    )
    logger.info(f"Evaluated {summary.num_images} images: mIoU={summary.miou:.4f} at threshold {threshold:.2f}")
    return summary


def evaluate_run(model, dataset, threshold: Optional[float] = None, grid: Iterable[float] = BG_THRESHOLD_GRID,
                 head: str = "sigmoid") -> EvalSummary:
    """Extract flip-averaged CAMs for an evaluation-mode dataset and score them."""
    if dataset.mode != "eval":
        dataset = dataset.as_eval()
    cams = collect_cams(model, dataset, head=head)
    return evaluate_cams(cams, dataset, threshold=threshold, grid=grid)
