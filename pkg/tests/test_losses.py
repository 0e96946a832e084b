# tests/test_losses.py
import math
import warnings

import pytest
import torch

from clims.core.config import LossWeights
from clims.core.prompts import build_prompt_book
from clims.exceptions import PromptBookError, ShapeError
from clims.losses import (
    area_regularization,
    btm_loss,
    cbs_loss,
    clamp_similarity,
    clims_batch_loss,
    mask_out,
    otm_loss,
    total_loss,
)
from clims.models.backbone import stable_sigmoid, upsample_maps
from clims.services.matcher import embed_prompt_book
from tests.conftest import BLUE, GREEN, RED, solid_image

EPS = 1e-4
F64 = torch.float64


def _t(values):
    return torch.tensor(values, dtype=F64)


@pytest.fixture
def book():
    return build_prompt_book(["apple", "leaf"], {"apple": ["sky"], "leaf": ["sky", "apple"]})


def _mosaic(generator, batch=2, size=8):
    """Images tiled from the three concept colours at random brightness."""
    colors = _t([RED, GREEN, BLUE])
    pick = torch.randint(0, 3, (batch, size, size), generator=generator)
    brightness = 0.5 + 0.5 * torch.rand(batch, size, size, generator=generator, dtype=F64)
    return (colors[pick] * brightness[..., None]).permute(0, 3, 1, 2).contiguous()


def _apple_sky_image():
    return torch.cat([solid_image(RED, 8, 4), solid_image(BLUE, 8, 4)], dim=-1).unsqueeze(0)


class TestMaskOut:
    def test_ones_keep_image(self):
        image = torch.rand(3, 5, 5, dtype=F64)
        assert torch.equal(mask_out(image, torch.ones(5, 5, dtype=F64)), image)

    def test_zeros_blank_image(self):
        assert torch.count_nonzero(mask_out(torch.rand(3, 5, 5), torch.zeros(5, 5))) == 0

    def test_foreground_and_background_sum_to_image(self):
        g = torch.Generator().manual_seed(11)
        image = torch.rand(2, 3, 6, 6, generator=g, dtype=F64)
        maps = torch.rand(2, 6, 6, generator=g, dtype=F64)
        torch.testing.assert_close(mask_out(image, maps) + mask_out(image, 1.0 - maps), image)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            mask_out(torch.rand(3, 5, 5), torch.ones(4, 5))


class TestClampSimilarity:
    @pytest.mark.parametrize("s, expected", [(-0.2, 1e-4), (1.0, 0.9999), (0.5, 0.5)])
    def test_examples(self, s, expected):
        assert clamp_similarity(s, EPS) == pytest.approx(expected, abs=1e-12)

    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            clamp_similarity(0.3, 0.5)


class TestMatchingTerms:
    def test_otm_saturated(self):
        s = clamp_similarity(_t([1.0]), EPS)
        assert otm_loss(s, _t([1.0])).item() == pytest.approx(-math.log(1 - EPS), abs=1e-9)

    def test_otm_half(self):
        assert otm_loss(_t([0.5]), _t([1.0])).item() == pytest.approx(0.693147, abs=1e-6)

    def test_otm_ignores_absent_class(self):
        assert otm_loss(_t([0.8, 0.1]), _t([1.0, 0.0])).item() == pytest.approx(0.223144, abs=1e-6)

    def test_btm_clamped_zero(self):
        s = clamp_similarity(_t([0.0]), EPS)
        assert btm_loss(s, _t([1.0])).item() == pytest.approx(-math.log(1 - EPS), abs=1e-9)

    def test_btm_half(self):
        assert btm_loss(_t([0.5]), _t([1.0])).item() == pytest.approx(0.693147, abs=1e-6)

    def test_btm_absent_class(self):
        assert btm_loss(_t([0.7]), _t([0.0])).item() == 0.0

    def test_cbs_two_backgrounds(self):
        assert cbs_loss(_t([[0.5, 0.5]]), _t([1.0]), [2]).item() == pytest.approx(1.386294, abs=1e-6)

    def test_cbs_empty_background_set(self):
        assert cbs_loss(_t([[0.3]]), _t([1.0]), [0]).item() == 0.0

    def test_cbs_sum_over_classes(self):
        loss = cbs_loss(_t([[0.5], [EPS]]), _t([1.0, 1.0]), [1, 1])
        assert loss.item() == pytest.approx(math.log(2) - math.log1p(-EPS), abs=1e-9)

    def test_batch_mean(self):
        s = _t([[0.5], [0.5]])
        y = _t([[1.0], [0.0]])
        assert otm_loss(s, y).item() == pytest.approx(0.693147 / 2, abs=1e-6)

    def test_label_shape_mismatch(self):
        with pytest.raises(ShapeError):
            otm_loss(_t([0.5, 0.5]), _t([1.0]))


class TestMonotonicity:
    GRID = torch.linspace(EPS, 1.0 - EPS, 41, dtype=F64)

    def test_otm_falls_as_object_similarity_rises(self):
        values = [otm_loss(_t([s, 0.3]), _t([1.0, 1.0])).item() for s in self.GRID.tolist()]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_btm_rises_with_background_similarity(self):
        values = [btm_loss(_t([0.3, s]), _t([1.0, 1.0])).item() for s in self.GRID.tolist()]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_cbs_rises_with_background_prompt_similarity(self):
        values = [cbs_loss(_t([[0.2, s]]), _t([1.0]), [2]).item() for s in self.GRID.tolist()]
        assert all(a < b for a, b in zip(values, values[1:]))


class TestAreaRegularization:
    def test_full_map(self):
        reg, areas = area_regularization(torch.ones(1, 4, 4, dtype=F64))
        assert reg.item() == 1.0
        assert areas.tolist() == [1.0]

    def test_half_map(self):
        reg, areas = area_regularization(torch.full((2, 4, 4), 0.5, dtype=F64))
        assert reg.item() == 0.5
        assert areas.tolist() == [0.5, 0.5]

    def test_one_on_one_off(self):
        maps = torch.stack([torch.ones(4, 4, dtype=F64), torch.zeros(4, 4, dtype=F64)])
        assert area_regularization(maps)[0].item() == 0.5

    def test_matches_double_loop(self):
        g = torch.Generator().manual_seed(4)
        maps = torch.rand(3, 2, 5, 6, generator=g, dtype=F64)
        reg, areas = area_regularization(maps)
        b, k, h, w = maps.shape
        per_class = [0.0] * k
        per_image = []
        for bb in range(b):
            total = 0.0
            for kk in range(k):
                s = 0.0
                for i in range(h):
                    for j in range(w):
                        s += float(maps[bb, kk, i, j])
                s /= h * w
                per_class[kk] += s / b
                total += s
            per_image.append(total / k)
        assert reg.item() == pytest.approx(sum(per_image) / b, abs=1e-12)
        assert areas.tolist() == pytest.approx(per_class, abs=1e-12)


class TestTotalLoss:
    def test_published_weights(self):
        assert total_loss(0.1, 0.2, 0.05, 0.5, LossWeights()) == pytest.approx(8.05, abs=1e-9)

    def test_all_zero(self):
        assert total_loss(0.0, 0.0, 0.0, 0.0, LossWeights()) == 0.0

    def test_projection(self):
        assert total_loss(0.3, 0.2, 0.05, 0.5, (1, 0, 0, 0)) == pytest.approx(0.3)


class TestBatchLoss:
    def test_all_negative_labels(self, matcher, book):
        images = _mosaic(torch.Generator().manual_seed(0))
        maps = torch.full((2, 2, 8, 8), 0.3, dtype=F64)
        out = clims_batch_loss(images, torch.zeros(2, 2), maps, book, matcher, LossWeights())
        assert out.otm.item() == 0.0
        assert out.btm.item() == 0.0
        assert out.cbs.item() == 0.0
        assert out.reg.item() == pytest.approx(0.3)
        assert out.total.item() == pytest.approx(1.15 * 0.3)

    def test_full_map_leaves_null_background(self, matcher, book):
        images = _apple_sky_image()
        maps = torch.ones(1, 2, 8, 8, dtype=F64)
        out = clims_batch_loss(images, torch.tensor([[1, 0]]), maps, book, matcher, LossWeights())
        assert out.btm.item() == pytest.approx(-math.log(1 - EPS), abs=1e-9)

    def test_duplicated_image_matches_single(self, matcher, book):
        g = torch.Generator().manual_seed(1)
        image = _mosaic(g, batch=1)
        maps = torch.rand(1, 2, 8, 8, generator=g, dtype=F64)
        labels = torch.tensor([[1, 1]])
        single = clims_batch_loss(image, labels, maps, book, matcher, LossWeights())
        double = clims_batch_loss(image.repeat(2, 1, 1, 1), labels.repeat(2, 1), maps.repeat(2, 1, 1, 1),
                                  book, matcher, LossWeights())
        assert double.total.item() == pytest.approx(single.total.item(), rel=1e-12)

    def test_correct_localization_scores_lower(self, matcher, book):
        images = _apple_sky_image()
        labels = torch.tensor([[1, 0]])
        good = torch.zeros(1, 2, 8, 8, dtype=F64)
        good[0, 0, :, :4] = 1.0
        vague = torch.full((1, 2, 8, 8), 0.5, dtype=F64)
        weights = LossWeights()
        a = clims_batch_loss(images, labels, good, book, matcher, weights)
        b = clims_batch_loss(images, labels, vague, book, matcher, weights)
        assert a.otm < b.otm
        assert a.btm < b.btm
        assert a.cbs < b.cbs

    def test_precomputed_embeddings(self, matcher, book):
        images = _mosaic(torch.Generator().manual_seed(2))
        maps = torch.full((2, 2, 8, 8), 0.4, dtype=F64)
        labels = torch.tensor([[1, 0], [1, 1]])
        a = clims_batch_loss(images, labels, maps, book, matcher, LossWeights())
        b = clims_batch_loss(images, labels, maps, embed_prompt_book(matcher, book), matcher, LossWeights())
        assert a.total.item() == b.total.item()

    def test_record_from_graph_tensors_is_silent(self, matcher, book):
        images = _mosaic(torch.Generator().manual_seed(4))
        maps = torch.full((2, 2, 8, 8), 0.4, dtype=F64, requires_grad=True)
        out = clims_batch_loss(images, torch.tensor([[1, 0], [1, 1]]), maps, book, matcher, LossWeights())
        assert out.total.requires_grad
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            record = out.to_record()
        assert set(record) == {"otm", "btm", "cbs", "reg", "cls", "total", "mean_area"}
        assert all(isinstance(v, float) for v in record.values())
        assert record["mean_area"] == pytest.approx(0.4)

    def test_labels_beyond_prompt_book(self, matcher, book):
        images = _mosaic(torch.Generator().manual_seed(3), batch=1)
        with pytest.raises(PromptBookError):
            clims_batch_loss(images, torch.ones(1, 3), torch.rand(1, 3, 8, 8, dtype=F64), book, matcher, LossWeights())

    def test_maps_must_match_image_size(self, matcher, book):
        images = _mosaic(torch.Generator().manual_seed(3), batch=1)
        with pytest.raises(ShapeError):
            clims_batch_loss(images, torch.ones(1, 2), torch.rand(1, 2, 4, 4, dtype=F64), book, matcher, LossWeights())


class TestGradients:
    def _objective(self, images, labels, matcher, book, weights):
        embeddings = embed_prompt_book(matcher, book)

        def fn(logits):
            maps = upsample_maps(stable_sigmoid(logits), 8, 8)
            return clims_batch_loss(images, labels, maps, embeddings, matcher, weights).total

        return fn

    def test_total_loss_gradient(self, matcher, book):
        g = torch.Generator().manual_seed(5)
        for _ in range(20):
            images = _mosaic(g)
            labels = torch.randint(0, 2, (2, 2), generator=g)
            logits = torch.randn(2, 2, 4, 4, generator=g, dtype=F64, requires_grad=True)
            fn = self._objective(images, labels, matcher, book, LossWeights())
            assert torch.autograd.gradcheck(fn, (logits,), eps=1e-5, atol=1e-6, rtol=1e-4)

    @pytest.mark.parametrize("term", ["alpha", "beta", "gamma", "delta"])
    def test_single_term_gradient(self, matcher, book, term):
        weights = LossWeights(**{name: 1.0 if name == term else 0.0 for name in ("alpha", "beta", "gamma", "delta")})
        g = torch.Generator().manual_seed(8)
        for _ in range(20):
            images = _mosaic(g)
            labels = torch.tensor([[1, 1], [1, 0]])
            logits = torch.randn(2, 2, 4, 4, generator=g, dtype=F64, requires_grad=True)
            fn = self._objective(images, labels, matcher, book, weights)
            assert torch.autograd.gradcheck(fn, (logits,), eps=1e-5, atol=1e-6, rtol=1e-4)

    def test_absent_classes_get_no_matching_gradient(self, matcher, book):
        images = _mosaic(torch.Generator().manual_seed(6))
        logits = torch.randn(2, 2, 4, 4, dtype=F64, requires_grad=True)
        weights = LossWeights(delta=0.0)
        self._objective(images, torch.zeros(2, 2), matcher, book, weights)(logits).backward()
        assert torch.count_nonzero(logits.grad) == 0

    def test_absent_class_slice_untouched_by_matching_terms(self, matcher, book):
        images = _mosaic(torch.Generator().manual_seed(7))
        logits = torch.randn(2, 2, 4, 4, dtype=F64, requires_grad=True)
        weights = LossWeights(delta=0.0)
        labels = torch.tensor([[1, 0], [1, 0]])
        self._objective(images, labels, matcher, book, weights)(logits).backward()
        assert torch.count_nonzero(logits.grad[:, 1]) == 0
        assert torch.count_nonzero(logits.grad[:, 0]) > 0
