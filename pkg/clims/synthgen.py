# clims/synthgen.py
"""
Deterministic desk-scale scenes with controllable object/background co-occurrence.

Objects are solid rectangles or discs; co-occurring backgrounds are horizontal
textured bands under the object (stripes or multiplicative noise). Textures
only modulate brightness, so every background pixel keeps its concept's
chromaticity and stays recognizable to the synthetic matcher.

On disk:
    images/NNNNN.png   8-bit RGB
    masks/NNNNN.png    8-bit grayscale, value = class index (0 = background)
    manifest.json      spec hash, class names, per-scene {image_path, mask_path, labels}
    spec.json          the SceneSpec
    concepts.json      ConceptTable for the synthetic matcher
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from clims.config import CONCEPTS_FILE, MANIFEST_FILE, SPEC_FILE
from clims.exceptions import DatasetError, DatasetIOError, SceneSpecError

logger = logging.getLogger(__name__)


# ────────────────────────────────
# Spec
# ────────────────────────────────
class SceneConcept(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(min_length=1)
    color: Tuple[float, float, float]
    role: Literal["object", "background"]
    tolerance: float = Field(default=0.25, gt=0, le=1.0)
    shape: Literal["rectangle", "disc"] = "rectangle"
    texture: Literal["stripes", "noise", "flat"] = "stripes"


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    canvas_size: Tuple[int, int] = (64, 64)
    canvas_color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    concepts: Tuple[SceneConcept, ...]
    cooccurrence: Dict[str, Dict[str, float]] = {}
    object_count: Tuple[int, int] = (1, 2)
    object_fraction: Tuple[float, float] = (0.03, 0.40)
    text_affinity: Dict[str, Dict[str, float]] = {}
    seed: int = Field(default=0, ge=0)
    max_attempts: int = Field(default=64, ge=1)

    @model_validator(mode="after")
    def _check(self):
        h, w = self.canvas_size
        if h < 8 or w < 8:
            raise ValueError(f"canvas {h}x{w} is below the 8x8 minimum")
        names = [c.name for c in self.concepts]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate concept names in {names}")
        if not self.object_names:
            raise ValueError("at least one object concept is required")
        for obj, table in self.cooccurrence.items():
            if obj not in self.object_names:
                raise ValueError(f"co-occurrence refers to unknown object '{obj}'")
            for bg, p in table.items():
                if bg not in self.background_names:
                    raise ValueError(f"co-occurrence {obj} -> {bg}: unknown background concept")
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"co-occurrence {obj} -> {bg} = {p} is not a probability")
        lo, hi = self.object_count
        if lo < 1 or hi < lo:
            raise ValueError(f"object_count {self.object_count} must satisfy 1 <= min <= max")
        flo, fhi = self.object_fraction
        if not 0.0 <= flo <= fhi <= 1.0:
            raise ValueError(f"object_fraction {self.object_fraction} must satisfy 0 <= min <= max <= 1")
        return self

    @property
    def object_names(self) -> List[str]:
        return [c.name for c in self.concepts if c.role == "object"]

    @property
    def background_names(self) -> List[str]:
        return [c.name for c in self.concepts if c.role == "background"]

    @property
    def class_names(self) -> List[str]:
        return self.object_names

    def concept(self, name: str) -> SceneConcept:
        for c in self.concepts:
            if c.name == name:
                return c
        raise SceneSpecError(f"Unknown concept '{name}'")

    def background_map(self) -> Dict[str, List[str]]:
        """Class-related backgrounds per object: every background it can co-occur with."""
        return {obj: [bg for bg, p in self.cooccurrence.get(obj, {}).items() if p > 0] for obj in self.object_names}

    def spec_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def default_scene_spec(cooccurrence: float = 0.9, seed: int = 0) -> SceneSpec:
    return SceneSpec(
        canvas_size=(64, 64),
        canvas_color=(0.5, 0.5, 0.5),
        concepts=(
            SceneConcept(name="toy-train", color=(0.9, 0.1, 0.1), role="object", shape="rectangle"),
            SceneConcept(name="toy-boat", color=(0.1, 0.8, 0.2), role="object", shape="disc"),
            SceneConcept(name="railroad", color=(0.24, 0.04, 0.24), role="background", texture="stripes"),
            SceneConcept(name="river", color=(0.05, 0.1, 0.45), role="background", texture="noise"),
        ),
        cooccurrence={"toy-train": {"railroad": cooccurrence}, "toy-boat": {"river": cooccurrence}},
        object_count=(1, 2),
        object_fraction=(0.03, 0.40),
        # encode_text("a photo of toy-train") is deliberately not the toy-train
        # concept vector: it sits halfway toward railroad. Dark backgrounds make
        # that prompt best matched by the object together with its background band.
        text_affinity={"toy-train": {"railroad": 1.0}, "toy-boat": {"river": 1.0}},
        seed=seed,
    )


def load_scene_spec(source: str | Path) -> SceneSpec:
    """'default' or a JSON file."""
    if str(source) == "default":
        return default_scene_spec()
    path = Path(source)
    try:
        return SceneSpec.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SceneSpecError(f"Scene spec not found: {path}")
    except ValidationError as e:
        raise SceneSpecError(f"Invalid scene spec {path}: {e}") from e


# ────────────────────────────────
# Scenes
# ────────────────────────────────
@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], 8-bit quantized
    labels: np.ndarray  # (K,) int64
    gt_mask: np.ndarray  # (H, W) uint8
    index: int

    @property
    def image_u8(self) -> np.ndarray:
        return np.round(self.image * 255.0).astype(np.uint8)


def _u8_to_float(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float64) / 255.0).astype(np.float32)


def _texture(kind: str, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "stripes":
        rows = np.arange(height)
        factor = np.where((rows // 2) % 2 == 0, 1.0, 0.6)
        return np.repeat(factor[:, None], width, axis=1)
    if kind == "noise":
        return 0.7 + 0.3 * rng.random((height, width))
    return np.ones((height, width))


def _shape_mask(shape: str, height: int, width: int, box: Tuple[int, int, int, int]) -> np.ndarray:
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    top, left, h, w = box
    xy = [left, top, left + w - 1, top + h - 1]
    if shape == "disc":
        draw.ellipse(xy, fill=1)
    else:
        draw.rectangle(xy, fill=1)
    return np.asarray(canvas, dtype=bool)


def generate_scene(spec: SceneSpec, index: int) -> Scene:
    """Deterministic in (spec.seed, index)."""
    height, width = spec.canvas_size
    objects = spec.object_names
    lo_side = max(4, int(round(0.15 * min(height, width))))
    hi_side = max(lo_side, int(round(0.45 * min(height, width))))
    if lo_side > min(height, width):
        raise SceneSpecError(f"Canvas {height}x{width} is too small for any object")

    rng = np.random.default_rng([spec.seed, index])
    flo, fhi = spec.object_fraction

    for _ in range(spec.max_attempts):
        image = np.empty((height, width, 3), dtype=np.float64)
        image[:] = spec.canvas_color
        gt = np.zeros((height, width), dtype=np.uint8)

        count = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
        placed = []
        for _ in range(count):
            k = int(rng.integers(len(objects)))
            h = int(rng.integers(lo_side, hi_side + 1))
            w = int(rng.integers(lo_side, hi_side + 1))
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            bands = []
            for bg, p in spec.cooccurrence.get(objects[k], {}).items():
                if rng.random() < p:
                    bands.append(bg)
            placed.append((k, (top, left, h, w), bands))

        # backgrounds first, objects on top
        for _, (top, _, h, _), bands in placed:
            for bg in bands:
                concept = spec.concept(bg)
                start = min(height - 1, top + h // 2)
                stop = min(height, top + h + h // 2)
                factor = _texture(concept.texture, stop - start, width, rng)
                image[start:stop] = np.asarray(concept.color)[None, None, :] * factor[..., None]

        for k, box, _ in placed:
            concept = spec.concept(objects[k])
            region = _shape_mask(concept.shape, height, width, box)
            image[region] = concept.color
            gt[region] = k + 1

        fraction = float((gt > 0).mean())
        if flo <= fraction <= fhi:
            u8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
            labels = np.array([int((gt == k + 1).any()) for k in range(len(objects))], dtype=np.int64)
            return Scene(image=_u8_to_float(u8), labels=labels, gt_mask=gt, index=index)

    raise SceneSpecError(
        f"Canvas {height}x{width} is too small for {spec.object_count} objects within "
        f"object fraction {spec.object_fraction} (scene {index}, {spec.max_attempts} attempts)"
    )


# ────────────────────────────────
# On-disk dataset
# ────────────────────────────────
def render_scenes(spec: SceneSpec, n: int, start_index: int = 0) -> List[Scene]:
    """Generate scenes start_index .. start_index+n-1 in memory."""
    if n < 0:
        raise SceneSpecError(f"n must be >= 0, got {n}")
    return [generate_scene(spec, i) for i in range(start_index, start_index + n)]


def write_dataset(spec: SceneSpec, scenes: Sequence[Scene], out_dir, start_index: int = 0) -> dict:
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"Cannot create dataset directory {out_dir}: {e}") from e

    class_names = spec.class_names
    scenes_meta = []
    label_counts = {name: 0 for name in class_names}
    for scene in scenes:
        image_rel = f"images/{scene.index:05d}.png"
        mask_rel = f"masks/{scene.index:05d}.png"
        _write_png(Image.fromarray(scene.image_u8), out_dir / image_rel)
        _write_png(Image.fromarray(scene.gt_mask), out_dir / mask_rel)
        for name, flag in zip(class_names, scene.labels):
            label_counts[name] += int(flag)
        scenes_meta.append({
            "image_path": image_rel, "mask_path": mask_rel, "labels": scene.labels.tolist(), "index": scene.index,
        })

    manifest = {
        "spec_hash": spec.spec_hash(),
        "class_names": class_names,
        "count": len(scenes),
        "start_index": start_index,
        "label_counts": label_counts,
        "scenes": scenes_meta,
    }
    from clims.services.matcher import ConceptTable

    _write_text(out_dir / MANIFEST_FILE, json.dumps(manifest, indent=2))
    _write_text(out_dir / SPEC_FILE, spec.model_dump_json(indent=2))
    _write_text(out_dir / CONCEPTS_FILE, ConceptTable.from_scene_spec(spec).model_dump_json(indent=2))
    logger.info(f"Wrote {len(scenes)} scenes to {out_dir} (spec {manifest['spec_hash'][:12]})")
    return manifest


def generate_dataset(spec: SceneSpec, n: int, out_dir, start_index: int = 0) -> dict:
    """Render all n scenes, then write them; a scene that cannot be drawn leaves out_dir untouched."""
    scenes = render_scenes(spec, n, start_index)
    return write_dataset(spec, scenes, out_dir, start_index)


def _write_png(image: Image.Image, path: Path) -> None:
    try:
        image.save(path, format="PNG")
    except OSError as e:
        raise DatasetIOError(f"Cannot write {path}: {e}") from e


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"Cannot write {path}: {e}") from e


class SceneDataset:
    """
    Image-level supervision by default. Ground-truth masks are only reachable
    with mode="eval".
    """

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, class_names: Sequence[str],
                 masks: Optional[torch.Tensor] = None, mode: str = "train",
                 root: Optional[Path] = None, spec: Optional[SceneSpec] = None):
        if mode not in ("train", "eval"):
            raise DatasetError(f"mode must be 'train' or 'eval', got {mode!r}")
        if labels.shape[0] != images.shape[0]:
            raise DatasetError(f"{images.shape[0]} images but {labels.shape[0]} label rows")
        if labels.dim() != 2 or labels.shape[1] != len(class_names):
            raise DatasetError(f"labels {tuple(labels.shape)} do not match {len(class_names)} classes")
        self._images = images
        self._labels = labels
        self._masks = masks
        self.class_names = list(class_names)
        self.mode = mode
        self.root = root
        self.spec = spec

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene], class_names: Sequence[str], mode: str = "train",
                    spec: Optional[SceneSpec] = None) -> "SceneDataset":
        if scenes:
            images = torch.from_numpy(np.stack([s.image for s in scenes])).permute(0, 3, 1, 2).contiguous()
            labels = torch.from_numpy(np.stack([s.labels for s in scenes])).float()
            masks = torch.from_numpy(np.stack([s.gt_mask for s in scenes]).astype(np.int64))
        else:
            images = torch.zeros(0, 3, 8, 8)
            labels = torch.zeros(0, len(class_names))
            masks = torch.zeros(0, 8, 8, dtype=torch.int64)
        return cls(images, labels, class_names, masks=masks, mode=mode, spec=spec)

    @classmethod
    def load(cls, root, mode: str = "train") -> "SceneDataset":
        root = Path(root)
        manifest_path = root / MANIFEST_FILE
        if not manifest_path.exists():
            raise DatasetError(f"No {MANIFEST_FILE} in {root}")
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DatasetError(f"Corrupt manifest {manifest_path}: {e}") from e

        class_names = manifest.get("class_names") or []
        entries = manifest.get("scenes", [])
        images, labels, masks = [], [], []
        for entry in entries:
            image_path = root / entry["image_path"]
            if not image_path.exists():
                raise DatasetError(f"Missing image {image_path}")
            with Image.open(image_path) as im:
                images.append(_u8_to_float(np.asarray(im.convert("RGB"))))
            labels.append(entry["labels"])
            if mode == "eval":
                mask_rel = entry.get("mask_path")
                mask_path = root / mask_rel if mask_rel else None
                if mask_path is None or not mask_path.exists():
                    raise DatasetError(f"Missing ground-truth mask for {entry['image_path']} in {root}")
                with Image.open(mask_path) as im:
                    masks.append(np.asarray(im, dtype=np.uint8).astype(np.int64))

        spec = None
        if (root / SPEC_FILE).exists():
            spec = SceneSpec.model_validate_json((root / SPEC_FILE).read_text(encoding="utf-8"))

        if images:
            image_t = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
            label_t = torch.tensor(labels, dtype=torch.float32)
        else:
            image_t = torch.zeros(0, 3, 8, 8)
            label_t = torch.zeros(0, len(class_names))
        mask_t = torch.from_numpy(np.stack(masks)) if masks else None
        logger.info(f"Loaded {len(images)} scenes from {root} ({mode} mode)")
        return cls(image_t, label_t, class_names, masks=mask_t, mode=mode, root=root, spec=spec)

    def __len__(self) -> int:
        return self._images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def images(self) -> torch.Tensor:
        return self._images

    @property
    def labels(self) -> torch.Tensor:
        return self._labels

    @property
    def masks(self) -> torch.Tensor:
        if self.mode != "eval":
            raise DatasetError("Ground-truth masks are only available in evaluation mode")
        if self._masks is None:
            raise DatasetError("This dataset has no ground-truth masks")
        return self._masks

    def __getitem__(self, i: int):
        if self.mode == "eval":
            return self._images[i], self._labels[i], self.masks[i]
        return self._images[i], self._labels[i]

    def as_eval(self) -> "SceneDataset":
        return SceneDataset(self._images, self._labels, self.class_names, masks=self._masks,
                            mode="eval", root=self.root, spec=self.spec)
