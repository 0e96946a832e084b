# clims/pipeline/world.py
"""Prompt book and matcher that belong to a generated dataset."""

import logging

from clims.config import CONCEPTS_FILE, DEFAULT_PROMPT_TEMPLATE
from clims.core.prompts import PromptBook, build_prompt_book
from clims.exceptions import DatasetError
from clims.services.matcher import ConceptTable, build_matcher

logger = logging.getLogger(__name__)


def prompt_book_for(dataset, template: str = DEFAULT_PROMPT_TEMPLATE) -> PromptBook:
    background_map = dataset.spec.background_map() if dataset.spec is not None else {}
    return build_prompt_book(dataset.class_names, background_map, template)


def concept_table_for(dataset) -> ConceptTable:
    if dataset.root is not None and (dataset.root / CONCEPTS_FILE).exists():
        return ConceptTable.load(dataset.root / CONCEPTS_FILE)
    if dataset.spec is not None:
        return ConceptTable.from_scene_spec(dataset.spec)
    raise DatasetError("Dataset carries neither a concept table nor a scene spec")


def matcher_for(dataset, kind: str = "synthetic"):
    table = concept_table_for(dataset) if kind == "synthetic" else None
    matcher = build_matcher(kind, table)
    logger.debug(f"Matcher '{kind}' built for dataset {dataset.root or '<memory>'}")
    return matcher
