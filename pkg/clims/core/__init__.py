from clims.core.config import (
    LossWeights,
    Settings,
    TrainConfig,
    config_hash,
    get_settings,
    load_config,
    parse_config,
    save_config,
)
from clims.core.prompts import (
    PromptBook,
    build_prompt_book,
    load_prompt_book,
    published_prompt_book,
    save_prompt_book,
)

__all__ = [
    "LossWeights",
    "PromptBook",
    "Settings",
    "TrainConfig",
    "build_prompt_book",
    "config_hash",
    "get_settings",
    "load_config",
    "load_prompt_book",
    "parse_config",
    "published_prompt_book",
    "save_config",
    "save_prompt_book",
]
