# clims/core/prompts.py
"""
Prompt book: one object prompt per class and a (possibly empty) list of
class-related background prompts per class.
"""

import json
import logging
import string
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict

from clims.config import BACKGROUND_SETS_VERSION, DEFAULT_PROMPT_TEMPLATE, PUBLISHED_BACKGROUND_SETS
from clims.exceptions import PromptBookError

logger = logging.getLogger(__name__)


class PromptBook(BaseModel):
    model_config = ConfigDict(frozen=True)

    class_names: Tuple[str, ...]
    object_prompts: Tuple[str, ...]
    background_prompts: Tuple[Tuple[str, ...], ...]
    template: str
    background_map: Dict[str, Tuple[str, ...]] = {}
    background_sets_version: Optional[str] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def background_counts(self) -> List[int]:
        return [len(b) for b in self.background_prompts]

    def index_of(self, class_name: str) -> int:
        try:
            return self.class_names.index(class_name)
        except ValueError:
            raise PromptBookError(f"Class '{class_name}' is not in the prompt book {list(self.class_names)}")

    def check_classes(self, class_names: Sequence[str]) -> None:
        """Every class a dataset labels must be present, in the same order."""
        missing = [c for c in class_names if c not in self.class_names]
        if missing:
            raise PromptBookError(f"Prompt book is missing classes {missing}")
        if tuple(class_names) != self.class_names:
            raise PromptBookError(
                f"Class order mismatch: dataset {list(class_names)} vs prompt book {list(self.class_names)}"
            )


def _placeholder_count(template: str) -> int:
    try:
        fields = [f for _, f, _, _ in string.Formatter().parse(template) if f is not None]
    except ValueError as e:
        raise PromptBookError(f"Malformed template {template!r}: {e}")
    return len(fields)


def build_prompt_book(
    class_names: Sequence[str],
    background_map: Optional[Mapping[str, Sequence[str]]] = None,
    template: str = DEFAULT_PROMPT_TEMPLATE,
    background_sets_version: Optional[str] = None,
) -> PromptBook:
    if isinstance(class_names, str):
        class_names = [class_names]
    class_names = list(class_names)
    background_map = dict(background_map or {})

    if not class_names:
        raise PromptBookError("At least one class name is required")
    duplicates = sorted({c for c in class_names if class_names.count(c) > 1})
    if duplicates:
        raise PromptBookError(f"Duplicate class names: {duplicates}")
    if _placeholder_count(template) != 1:
        raise PromptBookError(f"Template must contain exactly one placeholder, got {template!r}")

    unused = sorted(set(background_map) - set(class_names))
    if unused:
        logger.debug(f"Background sets for unknown classes ignored: {unused}")

    object_prompts = tuple(template.format(name) for name in class_names)
    background_prompts = tuple(
        tuple(template.format(b) for b in background_map.get(name, ())) for name in class_names
    )
    return PromptBook(
        class_names=tuple(class_names),
        object_prompts=object_prompts,
        background_prompts=background_prompts,
        template=template,
        background_map={name: tuple(background_map.get(name, ())) for name in class_names},
        background_sets_version=background_sets_version,
    )


def published_prompt_book(class_names: Sequence[str], template: str = DEFAULT_PROMPT_TEMPLATE) -> PromptBook:
    """Prompt book over the shipped background sets (train and boat only)."""
    book = build_prompt_book(class_names, PUBLISHED_BACKGROUND_SETS, template, BACKGROUND_SETS_VERSION)
    logger.info(f"Published background sets {BACKGROUND_SETS_VERSION}: {sum(book.background_counts)} background prompts")
    return book


def save_prompt_book(book: PromptBook, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "template": book.template,
        "classes": list(book.class_names),
        "backgrounds": {k: list(v) for k, v in book.background_map.items() if v},
    }
    if book.background_sets_version is not None:
        payload["background_sets_version"] = book.background_sets_version
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def load_prompt_book(path) -> PromptBook:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise PromptBookError(f"Prompt book not found: {path}")
    except json.JSONDecodeError as e:
        raise PromptBookError(f"Prompt book {path} is not valid JSON: {e}")

    unknown = set(data) - {"template", "classes", "backgrounds", "background_sets_version"}
    if unknown:
        raise PromptBookError(f"Unknown prompt book keys: {sorted(unknown)}")
    return build_prompt_book(
        data.get("classes", []),
        data.get("backgrounds", {}),
        data.get("template", DEFAULT_PROMPT_TEMPLATE),
        data.get("background_sets_version"),
    )
