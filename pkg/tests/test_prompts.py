# tests/test_prompts.py
import json

import pytest

from clims.config import BACKGROUND_SETS_VERSION, PUBLISHED_BACKGROUND_SETS
from clims.core.prompts import build_prompt_book, load_prompt_book, published_prompt_book, save_prompt_book
from clims.exceptions import PromptBookError


class TestBuildPromptBook:
    def test_train_background_set(self):
        book = build_prompt_book(["train"], PUBLISHED_BACKGROUND_SETS, "a photo of {}")
        assert book.object_prompts == ("a photo of train",)
        assert book.background_prompts == (("a photo of railroad", "a photo of railway", "a photo of tree"),)

    def test_boat_background_set(self):
        book = build_prompt_book(["boat"], {"boat": ["river", "sea", "lake"]}, "a photo of {}")
        assert book.background_prompts[0] == ("a photo of river", "a photo of sea", "a photo of lake")

    def test_class_without_backgrounds(self):
        book = build_prompt_book(["cat"], {}, "a photo of {}")
        assert book.object_prompts == ("a photo of cat",)
        assert book.background_prompts == ((),)
        assert book.background_counts == [0]

    def test_duplicate_class_names(self):
        with pytest.raises(PromptBookError, match="Duplicate"):
            build_prompt_book(["cat", "cat"])

    @pytest.mark.parametrize("template", ["a photo", "{} and {}", "a {photo"])
    def test_template_needs_one_placeholder(self, template):
        with pytest.raises(PromptBookError):
            build_prompt_book(["cat"], {}, template)

    def test_order_preserving(self):
        bg = {"boat": ["river"], "train": ["railroad"]}
        a = build_prompt_book(["train", "boat"], bg)
        b = build_prompt_book(["boat", "train"], bg)
        assert a.object_prompts == tuple(reversed(b.object_prompts))
        assert a.background_prompts[a.index_of("boat")] == b.background_prompts[b.index_of("boat")]

    def test_empty_class_list(self):
        with pytest.raises(PromptBookError):
            build_prompt_book([])


class TestPromptBookFile:
    def test_round_trip(self, tmp_path):
        book = build_prompt_book(["train", "cat"], PUBLISHED_BACKGROUND_SETS)
        loaded = load_prompt_book(save_prompt_book(book, tmp_path / "p.json"))
        assert loaded == book

    def test_documented_keys(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"template": "an image of {}", "classes": ["boat"], "backgrounds": {"boat": ["sea"]}}))
        book = load_prompt_book(path)
        assert book.object_prompts == ("an image of boat",)
        assert book.background_prompts == (("an image of sea",),)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"classes": ["boat"], "extra": 1}))
        with pytest.raises(PromptBookError):
            load_prompt_book(path)

    def test_check_classes(self):
        book = build_prompt_book(["a", "b"])
        book.check_classes(["a", "b"])
        with pytest.raises(PromptBookError):
            book.check_classes(["a", "c"])
        with pytest.raises(PromptBookError):
            book.check_classes(["b", "a"])


class TestPublishedPromptBook:
    def test_only_published_classes_get_backgrounds(self):
        book = published_prompt_book(["train", "cat", "boat"])
        assert book.background_counts == [3, 0, 3]
        assert book.background_sets_version == BACKGROUND_SETS_VERSION

    def test_version_survives_the_file(self, tmp_path):
        path = save_prompt_book(published_prompt_book(["boat"]), tmp_path / "p.json")
        assert json.loads(path.read_text())["background_sets_version"] == BACKGROUND_SETS_VERSION
        assert load_prompt_book(path).background_sets_version == BACKGROUND_SETS_VERSION

    def test_hand_written_book_has_no_version(self, tmp_path):
        path = save_prompt_book(build_prompt_book(["boat"], {"boat": ["sea"]}), tmp_path / "p.json")
        assert "background_sets_version" not in json.loads(path.read_text())
