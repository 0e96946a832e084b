# clims/losses.py
"""
Mask-out and the four matching / regularization objectives.

Shapes: images (B, 3, H, W); maps P (B, K, H, W) at image resolution, values in
[0, 1]; labels y (B, K) in {0, 1}. Per-image sums over classes are averaged
over the batch.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

import torch

from clims.core.config import LossWeights
from clims.core.prompts import PromptBook
from clims.exceptions import PromptBookError, ShapeError
from clims.services.matcher import Matcher, PromptEmbeddings, embed_prompt_book

logger = logging.getLogger(__name__)


@dataclass
class SimilarityBundle:
    s_oo: torch.Tensor  # (B, K)
    s_bo: torch.Tensor  # (B, K)
    s_ob: torch.Tensor  # (B, K, Lmax)
    valid: torch.Tensor  # (K, Lmax)


@dataclass
class LossBreakdown:
    otm: torch.Tensor
    btm: torch.Tensor
    cbs: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor
    areas: torch.Tensor  # S_k, averaged over the batch
    cls: torch.Tensor = field(default_factory=lambda: torch.tensor(0.0))

    @property
    def mean_area(self) -> float:
        return self.areas.detach().mean().item() if self.areas.numel() else 0.0

    def to_record(self) -> Dict[str, float]:
        terms = {"otm": self.otm, "btm": self.btm, "cbs": self.cbs, "reg": self.reg, "cls": self.cls, "total": self.total}
        return {
            **{name: value.detach().item() for name, value in terms.items()},
            "mean_area": self.mean_area,
        }

    def is_finite(self) -> bool:
        return all(torch.isfinite(t).all() for t in (self.otm, self.btm, self.cbs, self.reg, self.cls, self.total))

    @classmethod
    def for_classifier(cls, value: torch.Tensor, num_classes: int) -> "LossBreakdown":
        zero = torch.zeros((), dtype=value.dtype)
        return cls(otm=zero, btm=zero, cbs=zero, reg=zero, total=value,
                   areas=torch.zeros(num_classes, dtype=value.dtype), cls=value)


# ────────────────────────────────
# Elementary pieces
# ────────────────────────────────
def mask_out(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """X * M broadcast over colour channels: image (..., 3, H, W), mask (..., H, W)."""
    if image.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"Mask {tuple(mask.shape[-2:])} does not match image {tuple(image.shape[-2:])}")
    if mask.numel() and (mask.min() < 0 or mask.max() > 1):
        raise ShapeError("Mask values must lie within [0, 1]")
    return image * mask.unsqueeze(-3)


def clamp_similarity(s, eps: float):
    if not 0 < eps < 0.5:
        raise ValueError(f"eps must satisfy 0 < eps < 0.5, got {eps}")
    if isinstance(s, torch.Tensor):
        return s.clamp(min=eps, max=1.0 - eps)
    return min(max(float(s), eps), 1.0 - eps)


def _batch_mean(per_image: torch.Tensor) -> torch.Tensor:
    return per_image.mean() if per_image.dim() else per_image


def _labels_like(y: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=ref.dtype)
    if y.shape != ref.shape[: y.dim()]:
        raise ShapeError(f"Labels {tuple(y.shape)} do not match similarities {tuple(ref.shape)}")
    return y


def otm_loss(s_oo: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """-sum_k y_k log s_oo_k (similarities already clamped)."""
    y = _labels_like(y, s_oo)
    return _batch_mean(-(y * torch.log(s_oo)).sum(dim=-1))


def btm_loss(s_bo: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """-sum_k y_k log(1 - s_bo_k)."""
    y = _labels_like(y, s_bo)
    return _batch_mean(-(y * torch.log1p(-s_bo)).sum(dim=-1))


def background_validity(counts: Sequence[int], lmax: Optional[int] = None) -> torch.Tensor:
    lmax = max(list(counts) + [0]) if lmax is None else lmax
    return torch.arange(lmax).unsqueeze(0) < torch.as_tensor(list(counts)).unsqueeze(1)


def cbs_loss(s_ob: torch.Tensor, y: torch.Tensor, counts: Union[Sequence[int], torch.Tensor]) -> torch.Tensor:
    """-sum_k sum_{l < L_k} y_k log(1 - s_ob_kl). `counts` is L_k per class or a (K, Lmax) mask."""
    if isinstance(counts, torch.Tensor) and counts.dtype == torch.bool:
        valid = counts
    else:
        valid = background_validity(counts, s_ob.shape[-1])
    if valid.shape != s_ob.shape[-2:]:
        raise ShapeError(f"Validity mask {tuple(valid.shape)} does not match similarities {tuple(s_ob.shape)}")
    y = _labels_like(y, s_ob)
    terms = torch.where(valid, torch.log1p(-s_ob), torch.zeros_like(s_ob))
    return _batch_mean(-(y * terms.sum(dim=-1)).sum(dim=-1))


def area_regularization(maps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean activation per class S_k and their class average; label independent."""
    if maps.dim() < 3:
        raise ShapeError(f"Maps must be (..., K, H, W), got {tuple(maps.shape)}")
    areas = maps.mean(dim=(-2, -1))  # (..., K)
    reg = areas.mean(dim=-1)
    if areas.dim() > 1:
        return reg.mean(), areas.mean(dim=0)
    return reg, areas


def total_loss(otm, btm, cbs, reg, weights: Union[LossWeights, Sequence[float]]):
    alpha, beta, gamma, delta = weights.as_tuple() if isinstance(weights, LossWeights) else tuple(weights)
    return alpha * otm + beta * btm + gamma * cbs + delta * reg


# ────────────────────────────────
# Batch objective
# ────────────────────────────────
def compute_similarities(
    images: torch.Tensor,
    labels: torch.Tensor,
    maps: torch.Tensor,
    embeddings: PromptEmbeddings,
    matcher: Matcher,
) -> SimilarityBundle:
    """Encode X*P_k and X*(1-P_k) for every positive (image, class) pair."""
    batch, num_classes = labels.shape
    dtype = maps.dtype
    t_obj = embeddings.objects.to(dtype)
    t_bg = embeddings.backgrounds.to(dtype)
    lmax = t_bg.shape[1]

    s_oo = torch.zeros(batch, num_classes, dtype=dtype)
    s_bo = torch.zeros(batch, num_classes, dtype=dtype)
    s_ob = torch.zeros(batch, num_classes, lmax, dtype=dtype)

    b_idx, k_idx = (labels > 0).nonzero(as_tuple=True)
    if b_idx.numel():
        pair_maps = maps[b_idx, k_idx]  # (M, H, W)
        pair_images = images[b_idx].to(dtype)
        v_io = matcher.encode_image(mask_out(pair_images, pair_maps))
        v_ib = matcher.encode_image(mask_out(pair_images, 1.0 - pair_maps))

        # encoder outputs and text embeddings are unit vectors, so dot == cosine
        oo = (v_io * t_obj[k_idx]).sum(dim=-1).clamp(-1.0, 1.0)
        bo = (v_ib * t_obj[k_idx]).sum(dim=-1).clamp(-1.0, 1.0)
        ob = torch.einsum("md,mld->ml", v_io, t_bg[k_idx]).clamp(-1.0, 1.0)

        s_oo = s_oo.index_put((b_idx, k_idx), oo)
        s_bo = s_bo.index_put((b_idx, k_idx), bo)
        s_ob = s_ob.index_put((b_idx, k_idx), ob)

    return SimilarityBundle(s_oo=s_oo, s_bo=s_bo, s_ob=s_ob, valid=embeddings.valid)


def clims_batch_loss(
    images: torch.Tensor,
    labels: torch.Tensor,
    maps: torch.Tensor,
    prompts: Union[PromptBook, PromptEmbeddings],
    matcher: Matcher,
    weights: LossWeights,
    eps: float = 1e-4,
) -> LossBreakdown:
    if images.dim() != 4 or maps.dim() != 4:
        raise ShapeError(f"Expected batched images and maps, got {tuple(images.shape)} and {tuple(maps.shape)}")
    if maps.shape[-2:] != images.shape[-2:]:
        raise ShapeError(
            f"Activation maps {tuple(maps.shape[-2:])} must be upsampled to image size {tuple(images.shape[-2:])}"
        )
    embeddings = embed_prompt_book(matcher, prompts) if isinstance(prompts, PromptBook) else prompts

    labels = torch.as_tensor(labels)
    if labels.dim() != 2 or labels.shape[0] != images.shape[0]:
        raise ShapeError(f"Labels must be (B, K), got {tuple(labels.shape)} for batch {images.shape[0]}")
    num_book = len(embeddings.class_names)
    if labels.shape[1] > num_book:
        raise PromptBookError(f"Labels cover {labels.shape[1]} classes but the prompt book defines {num_book}")
    if labels.shape[1] != num_book or maps.shape[1] != num_book:
        raise ShapeError(f"Labels/maps class count ({labels.shape[1]}/{maps.shape[1]}) != prompt book ({num_book})")

    y = labels.to(maps.dtype)
    sims = compute_similarities(images, labels, maps, embeddings, matcher)

    otm = otm_loss(clamp_similarity(sims.s_oo, eps), y)
    btm = btm_loss(clamp_similarity(sims.s_bo, eps), y)
    cbs = cbs_loss(clamp_similarity(sims.s_ob, eps), y, sims.valid)
    reg, areas = area_regularization(maps)
    total = total_loss(otm, btm, cbs, reg, weights)
    return LossBreakdown(otm=otm, btm=btm, cbs=cbs, reg=reg, total=total, areas=areas.detach())
