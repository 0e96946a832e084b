# clims/evalkit/cams.py
"""
Inference-time CAMs and pseudo masks.

Two heads are supported: "sigmoid" (the matching-trained activation head) and
"cam" (the classification baseline, ReLU'd conventional CAMs divided by
their per-class maximum so both live in [0, 1]).
"""

import json
import logging
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
from PIL import Image

from clims.exceptions import ShapeError
from clims.models.backbone import CAMNet, upsample_maps

logger = logging.getLogger(__name__)

HEADS = ("sigmoid", "cam")
PNG_SCALE = 65535


def _raw_maps(model: CAMNet, images: torch.Tensor, head: str) -> torch.Tensor:
    if head == "sigmoid":
        return model(images)
    if head == "cam":
        return model.cam(images)
    raise ValueError(f"Unknown CAM head '{head}' (expected one of {HEADS})")


def extract_cams(model: CAMNet, image: torch.Tensor, labels: torch.Tensor, head: str = "sigmoid") -> torch.Tensor:
    """
    Maps at image resolution, averaged over the image and its horizontal
    flip and zeroed for classes whose label is 0.
    """
    model.require_ready()
    single = image.dim() == 3
    images = image.unsqueeze(0) if single else image
    labels = torch.as_tensor(labels)
    labels = labels.unsqueeze(0) if labels.dim() == 1 else labels
    if labels.shape != (images.shape[0], model.num_classes):
        raise ShapeError(f"Labels {tuple(labels.shape)} do not match {images.shape[0]} images x {model.num_classes} classes")

    height, width = images.shape[-2:]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        direct = _raw_maps(model, images, head)
        mirrored = torch.flip(_raw_maps(model, torch.flip(images, dims=(-1,)), head), dims=(-1,))
        maps = upsample_maps(0.5 * (direct + mirrored), height, width)
        if head == "cam":
            maps = torch.relu(maps)
            peak = maps.amax(dim=(-2, -1), keepdim=True)
            maps = torch.where(peak > 0, maps / peak.clamp_min(1e-12), torch.zeros_like(maps))
        maps = maps * (labels > 0).to(maps.dtype)[..., None, None]
    model.train(was_training)
    return maps[0] if single else maps


def to_pseudo_mask(cams: torch.Tensor, bg_threshold: float) -> torch.Tensor:
    """argmax_k + 1 where the best score reaches the threshold, else 0 (ties -> lowest k)."""
    if not 0 < bg_threshold < 1:
        raise ValueError(f"bg_threshold must lie in (0, 1), got {bg_threshold}")
    if cams.dim() < 3:
        raise ShapeError(f"CAMs must be (..., K, H, W), got {tuple(cams.shape)}")
    best, index = cams.max(dim=-3)
    # torch.max returns the first maximal index, i.e. the lowest class
    return torch.where(best >= bg_threshold, index + 1, torch.zeros_like(index))


def export_cams(cams: torch.Tensor, out_dir, stem: str, class_names: Sequence[str],
                threshold: float, config_hash: str) -> List[Path]:
    """One 16-bit grayscale PNG per class (value = round(65535 * P)) plus a JSON sidecar."""
    if cams.dim() != 3 or cams.shape[0] != len(class_names):
        raise ShapeError(f"CAMs {tuple(cams.shape)} do not match {len(class_names)} classes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    values = np.round(cams.detach().cpu().double().clamp(0.0, 1.0).numpy() * PNG_SCALE).astype(np.uint16)
    written = []
    for name, plane in zip(class_names, values):
        path = out_dir / f"{stem}_{name}.png"
        Image.fromarray(plane).save(path, format="PNG")
        written.append(path)

    sidecar = out_dir / f"{stem}.json"
    sidecar.write_text(json.dumps({
        "stem": stem,
        "class_names": list(class_names),
        "threshold": threshold,
        "config_hash": config_hash,
        "scale": PNG_SCALE,
        "files": [p.name for p in written],
    }, indent=2), encoding="utf-8")
    written.append(sidecar)
    logger.debug(f"Exported {len(class_names)} CAM planes for {stem} to {out_dir}")
    return written


def read_cam_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / PNG_SCALE
