from clims.services.matcher import (
    ConceptSignature,
    ConceptTable,
    Matcher,
    PromptEmbeddings,
    SyntheticMatcher,
    build_matcher,
    cosine_similarity,
    embed_prompt_book,
)

__all__ = [
    "ConceptSignature",
    "ConceptTable",
    "Matcher",
    "PromptEmbeddings",
    "SyntheticMatcher",
    "build_matcher",
    "cosine_similarity",
    "embed_prompt_book",
]
