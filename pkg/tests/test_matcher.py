# tests/test_matcher.py
import math

import pytest
import torch

from clims.core.prompts import build_prompt_book
from clims.exceptions import MatcherError
from clims.services.matcher import (
    ConceptSignature,
    ConceptTable,
    SyntheticMatcher,
    build_matcher,
    cosine_similarity,
    embed_prompt_book,
)
from tests.conftest import BLUE, GREEN, RED, solid_image


class TestEncodeImage:
    def test_pure_concept_image(self, matcher):
        v = matcher.encode_image(solid_image(RED))
        assert float(v @ matcher.concept_vector("apple")) == pytest.approx(1.0, abs=1e-6)

    def test_black_image_is_null(self, matcher):
        v = matcher.encode_image(torch.zeros(3, 8, 8, dtype=torch.float64))
        torch.testing.assert_close(v, matcher.null_embedding)
        for name in ("apple", "leaf", "sky"):
            assert float(v @ matcher.concept_vector(name)) == pytest.approx(0.0, abs=1e-12)

    def test_gray_image_is_null(self, matcher):
        v = matcher.encode_image(solid_image((0.5, 0.5, 0.5)))
        torch.testing.assert_close(v, matcher.null_embedding)

    def test_half_and_half(self):
        # equal luminance so both halves carry the same coverage weight
        table = ConceptTable(
            concepts=(ConceptSignature(name="a", color=(0.6, 0.3, 0.3)), ConceptSignature(name="b", color=(0.3, 0.3, 0.6))),
            dim=4,
        )
        m = SyntheticMatcher(table)
        lum_a = 0.299 * 0.6 + 0.587 * 0.3 + 0.114 * 0.3
        scale = lum_a / (0.299 * 0.3 + 0.587 * 0.3 + 0.114 * 0.6)
        image = torch.cat([solid_image((0.6, 0.3, 0.3), 8, 4), solid_image((0.3 * scale, 0.3 * scale, 0.6 * scale), 8, 4)], dim=-1)
        v = m.encode_image(image)
        assert float(v @ m.concept_vector("a")) == pytest.approx(1 / math.sqrt(2), abs=1e-6)
        assert float(v @ m.concept_vector("b")) == pytest.approx(1 / math.sqrt(2), abs=1e-6)

    def test_unit_norm(self, matcher):
        g = torch.Generator().manual_seed(0)
        images = torch.rand(6, 3, 8, 8, generator=g, dtype=torch.float64)
        norms = torch.linalg.vector_norm(matcher.encode_image(images), dim=-1)
        torch.testing.assert_close(norms, torch.ones(6, dtype=torch.float64), atol=1e-6, rtol=0)

    def test_scaling_keeps_direction(self, matcher):
        image = torch.cat([solid_image(RED, 8, 3), solid_image(BLUE, 8, 5)], dim=-1)
        torch.testing.assert_close(matcher.encode_image(image), matcher.encode_image(0.5 * image))

    def test_masking_a_concept_lowers_its_similarity(self, matcher):
        image = torch.cat([solid_image(RED, 8, 4), solid_image(GREEN, 8, 4)], dim=-1)
        masked = image.clone()
        masked[..., :4] = 0.0
        text = matcher.encode_text("a photo of apple")
        before = float(matcher.encode_image(image) @ text)
        after = float(matcher.encode_image(masked) @ text)
        assert after < before

    def test_gradient_wrt_pixels(self, matcher):
        g = torch.Generator().manual_seed(1)
        colors = torch.tensor([RED, GREEN, BLUE], dtype=torch.float64)
        for _ in range(3):
            pick = torch.randint(0, 3, (8, 8), generator=g)
            brightness = 0.5 + 0.5 * torch.rand(8, 8, generator=g, dtype=torch.float64)
            image = (colors[pick] * brightness[..., None]).permute(2, 0, 1).contiguous().requires_grad_(True)
            assert torch.autograd.gradcheck(matcher.encode_image, (image,), eps=1e-5, atol=1e-7, rtol=1e-4)

    def test_uninitialized(self):
        with pytest.raises(MatcherError):
            SyntheticMatcher().encode_image(torch.zeros(3, 8, 8))


class TestEncodeText:
    def test_lookup(self, matcher):
        torch.testing.assert_close(matcher.encode_text("a photo of sky"), matcher.concept_vector("sky"))

    def test_deterministic(self, matcher):
        assert torch.equal(matcher.encode_text("a photo of leaf"), matcher.encode_text("a photo of leaf"))

    def test_unknown_concept_lists_known(self, matcher):
        with pytest.raises(MatcherError, match="apple"):
            matcher.encode_text("a photo of unicorn")

    def test_whole_word_match(self, matcher):
        with pytest.raises(MatcherError):
            matcher.encode_text("a photo of pineapples")

    def test_affinity_leans_toward_background(self):
        table = ConceptTable(
            concepts=(ConceptSignature(name="boat", color=GREEN), ConceptSignature(name="river", color=BLUE)),
            dim=4,
            text_affinity={"boat": {"river": 1.0}},
        )
        m = SyntheticMatcher(table)
        t = m.encode_text("a photo of boat")
        assert float(torch.linalg.vector_norm(t)) == pytest.approx(1.0, abs=1e-12)
        assert float(t @ m.concept_vector("river")) == pytest.approx(1 / math.sqrt(2), abs=1e-9)

    def test_affinity_norm_bound(self):
        with pytest.raises(ValueError):
            ConceptTable(
                concepts=(ConceptSignature(name="a", color=RED), ConceptSignature(name="b", color=BLUE)),
                dim=4,
                text_affinity={"a": {"b": 1.5}},
            )


class TestCosineSimilarity:
    def test_identity(self):
        u = torch.tensor([0.6, 0.8])
        assert float(cosine_similarity(u, u)) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert float(cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == 0.0

    def test_scale_invariance(self):
        u = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
        assert float(cosine_similarity(u, 3 * u)) == pytest.approx(1.0, abs=1e-12)

    def test_zero_norm(self):
        with pytest.raises(MatcherError):
            cosine_similarity(torch.zeros(3), torch.ones(3))

    def test_randomized_properties(self):
        g = torch.Generator().manual_seed(2)
        u = torch.randn(50, 6, generator=g, dtype=torch.float64)
        v = torch.randn(50, 6, generator=g, dtype=torch.float64)
        s = cosine_similarity(u, v)
        torch.testing.assert_close(s, cosine_similarity(v, u))
        assert torch.all(s.abs() <= 1.0)
        torch.testing.assert_close(s, cosine_similarity(2.5 * u, 0.1 * v))


class TestConceptTable:
    def test_basis_is_orthonormal_and_seeded(self, concept_table):
        basis = concept_table.basis()
        torch.testing.assert_close(basis @ basis.T, torch.eye(4, dtype=torch.float64), atol=1e-12, rtol=0)
        assert torch.equal(basis, concept_table.basis())

    def test_save_load(self, concept_table, tmp_path):
        loaded = ConceptTable.load(concept_table.save(tmp_path / "c.json"))
        assert loaded == concept_table

    def test_dim_too_small(self):
        with pytest.raises(ValueError):
            ConceptTable(concepts=(ConceptSignature(name="a", color=RED),), dim=1)


class TestPromptEmbeddings:
    def test_ragged_backgrounds(self, matcher):
        book = build_prompt_book(["apple", "leaf"], {"apple": ["sky", "leaf"]})
        emb = embed_prompt_book(matcher, book)
        assert emb.objects.shape == (2, matcher.dim)
        assert emb.backgrounds.shape == (2, 2, matcher.dim)
        assert emb.background_counts == [2, 0]
        assert torch.count_nonzero(emb.backgrounds[1]) == 0

    def test_build_matcher(self, concept_table):
        assert isinstance(build_matcher("synthetic", concept_table), SyntheticMatcher)
        with pytest.raises(MatcherError):
            build_matcher("synthetic")
        with pytest.raises(MatcherError):
            build_matcher("mystery")
