# clims/services/matcher.py
"""
Image/text encoders behind a small protocol, plus a deterministic synthetic
implementation.

Synthetic image embedding of an image X:

    coverage  w_c = sum_pixels membership(pixel, c) * luminance(pixel)
    raw           = sum_c w_c * vec(c)
    embedding     = raw / ||raw||, or the null vector when ||raw|| < 1e-8

Membership is a compact smooth bump on chromaticity (colour direction), so
scaling a pixel (which is what masking does) only scales its luminance
weight, and the embedding stays differentiable in pixel values.
"""

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from clims.config import DEFAULT_EMBED_DIM, NULL_NORM_THRESHOLD
from clims.core.prompts import PromptBook
from clims.exceptions import MatcherError, ShapeError

logger = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)
_CHROMA_EPS = 1e-12


@runtime_checkable
class Matcher(Protocol):
    dim: int

    def encode_image(self, images: torch.Tensor) -> torch.Tensor: ...

    def encode_text(self, prompt: str) -> torch.Tensor: ...


# ────────────────────────────────
# Cosine similarity
# ────────────────────────────────
def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine over the last dimension, broadcasting leading dimensions."""
    if u.shape[-1] != v.shape[-1]:
        raise ShapeError(f"Dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    nu = torch.linalg.vector_norm(u, dim=-1)
    nv = torch.linalg.vector_norm(v, dim=-1)
    if (nu == 0).any() or (nv == 0).any():
        raise MatcherError("cosine similarity is undefined for zero-norm vectors")
    s = (u * v).sum(dim=-1) / (nu * nv)
    return s.clamp(-1.0, 1.0)


def normalize_or_null(raw: torch.Tensor, null: torch.Tensor, threshold: float = NULL_NORM_THRESHOLD) -> torch.Tensor:
    sq = (raw * raw).sum(dim=-1, keepdim=True)
    # clamp_min keeps the unselected branch finite so torch.where backprops cleanly
    norm = torch.sqrt(sq.clamp_min(1e-32))
    unit = raw / norm
    return torch.where(norm < threshold, null.to(raw.dtype).expand_as(raw), unit)


# ────────────────────────────────
# Concept table
# ────────────────────────────────
class ConceptSignature(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(min_length=1)
    color: Tuple[float, float, float]
    tolerance: float = Field(default=0.25, gt=0, le=1.0)

    @model_validator(mode="after")
    def _check_color(self):
        if any(c < 0 or c > 1 for c in self.color):
            raise ValueError(f"color of '{self.name}' must lie within [0, 1]")
        if sum(self.color) <= 0:
            raise ValueError(f"color of '{self.name}' must not be black")
        return self

    def chromaticity(self) -> torch.Tensor:
        c = torch.tensor(self.color, dtype=torch.float64)
        return c / torch.linalg.vector_norm(c)


class ConceptTable(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    concepts: Tuple[ConceptSignature, ...]
    dim: int = Field(default=DEFAULT_EMBED_DIM, ge=2)
    seed: int = 0
    text_affinity: Dict[str, Dict[str, float]] = {}

    @model_validator(mode="after")
    def _check(self):
        names = [c.name for c in self.concepts]
        if not names:
            raise ValueError("a concept table needs at least one concept")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate concept names in {names}")
        if self.dim < len(names) + 1:
            raise ValueError(f"dim={self.dim} is too small for {len(names)} concepts plus the null vector")
        for source, targets in self.text_affinity.items():
            if source not in names:
                raise ValueError(f"text_affinity refers to unknown concept '{source}'")
            for target, weight in targets.items():
                if target not in names or target == source:
                    raise ValueError(f"text_affinity {source} -> {target} is not a different known concept")
                if weight < 0:
                    raise ValueError(f"text_affinity {source} -> {target} must be nonnegative")
            # ||rho|| <= 1 keeps "masking out a concept never raises its text similarity"
            if sum(w * w for w in targets.values()) > 1.0 + 1e-12:
                raise ValueError(f"text_affinity of '{source}' has norm > 1")
        return self

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.concepts]

    def basis(self) -> torch.Tensor:
        """(N + 1, D) orthonormal rows: concept vectors, then the null vector."""
        g = torch.Generator().manual_seed(self.seed)
        gaussian = torch.randn(self.dim, self.dim, generator=g, dtype=torch.float64)
        q, _ = torch.linalg.qr(gaussian)
        return q[:, : len(self.concepts) + 1].t().contiguous()

    @classmethod
    def from_scene_spec(cls, spec, dim: int = DEFAULT_EMBED_DIM, seed: Optional[int] = None,
                        text_affinity: Optional[Dict[str, Dict[str, float]]] = None) -> "ConceptTable":
        concepts = tuple(
            ConceptSignature(name=c.name, color=c.color, tolerance=c.tolerance) for c in spec.concepts
        )
        return cls(
            concepts=concepts,
            dim=max(dim, len(concepts) + 1),
            seed=spec.seed if seed is None else seed,
            text_affinity=spec.text_affinity if text_affinity is None else text_affinity,
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "ConceptTable":
        try:
            return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise MatcherError(f"Concept table not found: {path}")


# ────────────────────────────────
# Synthetic matcher
# ────────────────────────────────
class SyntheticMatcher:
    """Differentiable, frozen stand-in for a pretrained image-text model."""

    def __init__(self, table: Optional[ConceptTable] = None):
        self.table: Optional[ConceptTable] = None
        if table is not None:
            self.load(table)

    def load(self, table: ConceptTable) -> "SyntheticMatcher":
        self.table = table
        basis = table.basis()
        self._vectors = basis[:-1]
        self._null = basis[-1]
        self._chroma = torch.stack([c.chromaticity() for c in table.concepts])
        self._radius = torch.tensor([c.tolerance for c in table.concepts], dtype=torch.float64)
        self._patterns = {
            name: re.compile(rf"(?<![\w-]){re.escape(name.lower())}(?![\w-])") for name in table.names
        }
        self._text_cache: Dict[str, torch.Tensor] = {}
        logger.info(f"Synthetic matcher ready: {len(table.concepts)} concepts, dim={table.dim}")
        return self

    @property
    def dim(self) -> int:
        self._require()
        return self.table.dim

    @property
    def null_embedding(self) -> torch.Tensor:
        self._require()
        return self._null.clone()

    def concept_vector(self, name: str) -> torch.Tensor:
        self._require()
        try:
            return self._vectors[self.table.names.index(name)].clone()
        except ValueError:
            raise MatcherError(f"Unknown concept '{name}'; known concepts: {self.table.names}")

    def _require(self) -> None:
        if self.table is None:
            raise MatcherError("Matcher is not initialized (no concept table loaded)")

    def coverage(self, images: torch.Tensor) -> torch.Tensor:
        """Per-concept coverage w_c for images (..., 3, H, W) -> (..., N)."""
        self._require()
        if images.dim() < 3 or images.shape[-3] != 3:
            raise ShapeError(f"Expected images (..., 3, H, W), got {tuple(images.shape)}")
        dtype = images.dtype
        x = images.movedim(-3, -1)  # (..., H, W, 3)
        norm = torch.sqrt((x * x).sum(dim=-1, keepdim=True) + _CHROMA_EPS**2)
        chroma = x / norm
        luminance = (x * torch.tensor(LUMA, dtype=dtype)).sum(dim=-1)  # (..., H, W)

        centres = self._chroma.to(dtype)  # (N, 3)
        d2 = ((chroma.unsqueeze(-2) - centres) ** 2).sum(dim=-1)  # (..., H, W, N)
        r2 = (self._radius.to(dtype) ** 2)
        membership = torch.clamp(1.0 - d2 / r2, min=0.0) ** 2
        return (membership * luminance.unsqueeze(-1)).sum(dim=(-3, -2))

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        w = self.coverage(images)
        raw = w @ self._vectors.to(w.dtype)
        return normalize_or_null(raw, self._null)

    def resolve_concept(self, prompt: str) -> str:
        self._require()
        if not prompt or not prompt.strip():
            raise MatcherError("Prompt must be a nonempty string")
        text = prompt.lower()
        hits = [name for name, pattern in self._patterns.items() if pattern.search(text)]
        if not hits:
            raise MatcherError(f"Prompt {prompt!r} mentions no known concept; known concepts: {self.table.names}")
        return max(hits, key=len)

    def encode_text(self, prompt: str) -> torch.Tensor:
        self._require()
        if prompt in self._text_cache:
            return self._text_cache[prompt].clone()
        name = self.resolve_concept(prompt)
        vec = self.concept_vector(name)
        for other, weight in self.table.text_affinity.get(name, {}).items():
            vec = vec + weight * self.concept_vector(other)
        vec = vec / torch.linalg.vector_norm(vec)
        self._text_cache[prompt] = vec
        return vec.clone()


# ────────────────────────────────
# Cached prompt-book embeddings
# ────────────────────────────────
@dataclass(frozen=True)
class PromptEmbeddings:
    objects: torch.Tensor  # (K, D)
    backgrounds: torch.Tensor  # (K, Lmax, D), zero rows where invalid
    valid: torch.Tensor  # (K, Lmax) bool
    class_names: Tuple[str, ...]

    @property
    def background_counts(self) -> List[int]:
        return self.valid.sum(dim=1).tolist()

    def to(self, dtype: torch.dtype) -> "PromptEmbeddings":
        return PromptEmbeddings(self.objects.to(dtype), self.backgrounds.to(dtype), self.valid, self.class_names)


def embed_prompt_book(matcher: Matcher, book: PromptBook) -> PromptEmbeddings:
    with torch.no_grad():
        objects = torch.stack([matcher.encode_text(p).detach() for p in book.object_prompts])
        dim = objects.shape[-1]
        lmax = max([len(b) for b in book.background_prompts] + [1])
        backgrounds = torch.zeros(book.num_classes, lmax, dim, dtype=objects.dtype)
        valid = torch.zeros(book.num_classes, lmax, dtype=torch.bool)
        for k, prompts in enumerate(book.background_prompts):
            for l, prompt in enumerate(prompts):
                backgrounds[k, l] = matcher.encode_text(prompt).detach().to(objects.dtype)
                valid[k, l] = True
    logger.debug(f"Embedded prompt book: {book.num_classes} classes, backgrounds {book.background_counts}")
    return PromptEmbeddings(objects, backgrounds, valid, book.class_names)


def build_matcher(kind: str, table: Optional[ConceptTable] = None):
    """'synthetic' or 'clip:<model-id>'."""
    if kind == "synthetic":
        if table is None:
            raise MatcherError("The synthetic matcher needs a concept table")
        return SyntheticMatcher(table)
    if kind.startswith("clip:"):
        from clims.services.clip_matcher import PretrainedClipMatcher

        return PretrainedClipMatcher(kind.split(":", 1)[1])
    raise MatcherError(f"Unknown matcher '{kind}' (expected 'synthetic' or 'clip:<model-id>')")
