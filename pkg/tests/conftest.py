# tests/conftest.py
import pytest
import torch

from clims.services.matcher import ConceptSignature, ConceptTable, SyntheticMatcher
from clims.synthgen import SceneDataset, default_scene_spec, generate_scene

RED = (0.9, 0.1, 0.1)
GREEN = (0.1, 0.8, 0.2)
BLUE = (0.1, 0.2, 0.9)


@pytest.fixture
def concept_table() -> ConceptTable:
    return ConceptTable(
        concepts=(
            ConceptSignature(name="apple", color=RED),
            ConceptSignature(name="leaf", color=GREEN),
            ConceptSignature(name="sky", color=BLUE),
        ),
        dim=8,
        seed=3,
    )


@pytest.fixture
def matcher(concept_table) -> SyntheticMatcher:
    return SyntheticMatcher(concept_table)


def solid_image(color, height=8, width=8, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(color, dtype=dtype).view(3, 1, 1).expand(3, height, width).clone()


@pytest.fixture
def small_spec():
    """The default scene world on a 32x32 canvas."""
    return default_scene_spec().model_copy(update={"canvas_size": (32, 32)})


@pytest.fixture
def small_dataset(small_spec) -> SceneDataset:
    scenes = [generate_scene(small_spec, i) for i in range(8)]
    return SceneDataset.from_scenes(scenes, small_spec.class_names, spec=small_spec)
