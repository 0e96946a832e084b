# clims/core/config.py
import hashlib
import json
import logging
from pathlib import Path
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from clims.config import (
    CLS_TERM,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CLAMP_EPSILON,
    DEFAULT_CROP_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_LOSS_WEIGHTS,
    DEFAULT_MOMENTUM,
    DEFAULT_WEIGHT_DECAY,
    LOSS_TERMS,
)
from clims.exceptions import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-level knobs read from the environment / .env."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="CLIMS_",
        env_ignore_empty=True,
        extra="ignore",
    )

    NUM_WORKERS: Optional[int] = Field(default=None, ge=1)
    LOG_LEVEL: str = "INFO"
    DETERMINISTIC: bool = False


def get_settings() -> Settings:
    return Settings()


# ────────────────────────────────
# Loss weights (α, β, γ, δ)
# ────────────────────────────────
class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(default=DEFAULT_LOSS_WEIGHTS[0], ge=0)
    beta: float = Field(default=DEFAULT_LOSS_WEIGHTS[1], ge=0)
    gamma: float = Field(default=DEFAULT_LOSS_WEIGHTS[2], ge=0)
    delta: float = Field(default=DEFAULT_LOSS_WEIGHTS[3], ge=0)

    def restricted_to(self, terms) -> "LossWeights":
        """Zero the weight of every term not listed in `terms`."""
        terms = set(terms)
        unknown = terms - set(LOSS_TERMS)
        if unknown:
            raise ConfigError(f"Unknown loss terms: {sorted(unknown)}; expected a subset of {list(LOSS_TERMS)}")
        return LossWeights(
            alpha=self.alpha if "otm" in terms else 0.0,
            beta=self.beta if "btm" in terms else 0.0,
            gamma=self.gamma if "cbs" in terms else 0.0,
            delta=self.delta if "reg" in terms else 0.0,
        )

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.delta)


# ────────────────────────────────
# Training configuration
# ────────────────────────────────
class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(default=DEFAULT_LEARNING_RATE, gt=0)
    weight_decay: float = Field(default=DEFAULT_WEIGHT_DECAY, ge=0)
    momentum: float = Field(default=DEFAULT_MOMENTUM, ge=0, lt=1)
    epochs: int = Field(default=DEFAULT_EPOCHS, ge=1)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    crop_size: int = Field(default=DEFAULT_CROP_SIZE, ge=8)
    seed: int = Field(default=0, ge=0)
    similarity_clamp_epsilon: float = Field(default=DEFAULT_CLAMP_EPSILON, gt=0, lt=0.5)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    losses: Tuple[str, ...] = LOSS_TERMS
    backbone: Literal["tiny-cnn", "resnet50"] = "tiny-cnn"
    grad_clip_norm: Optional[float] = Field(default=None, gt=0)
    deterministic: bool = False
    log_every: int = Field(default=10, ge=1)

    @field_validator("losses", mode="before")
    @classmethod
    def _parse_losses(cls, value):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        terms = tuple(str(v).lower() for v in value)
        if not terms:
            raise ValueError("at least one loss term is required")
        allowed = set(LOSS_TERMS) | {CLS_TERM}
        unknown = [t for t in terms if t not in allowed]
        if unknown:
            raise ValueError(f"unknown loss terms {unknown}; allowed: {sorted(allowed)}")
        if CLS_TERM in terms and len(terms) > 1:
            raise ValueError("'cls' (classification baseline) cannot be combined with matching losses")
        if len(set(terms)) != len(terms):
            raise ValueError(f"duplicate loss terms in {list(terms)}")
        return terms

    @property
    def objective(self) -> str:
        return "cls" if self.losses == (CLS_TERM,) else "clims"

    def effective_weights(self) -> LossWeights:
        if self.objective == "cls":
            return LossWeights(alpha=0, beta=0, gamma=0, delta=0)
        return self.loss_weights.restricted_to(self.losses)

    def with_overrides(self, **overrides) -> "TrainConfig":
        """Return a validated copy; `None` values are ignored."""
        data = self.model_dump()
        for key, value in overrides.items():
            if value is None:
                continue
            if key in LossWeights.model_fields:
                data["loss_weights"][key] = value
            else:
                data[key] = value
        return parse_config(data)


def parse_config(data: dict) -> TrainConfig:
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from e


def load_config(path) -> TrainConfig:
    """
    Load a JSON config; absent keys fall back to the published defaults.
    An empty file means "all defaults".
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")

    text = path.read_text(encoding="utf-8").strip()
    if not text:
        logger.info(f"Empty config {path} - using defaults")
        return TrainConfig()

    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must be a JSON object, got {type(data).__name__}")

    return parse_config(data)


def save_config(config: TrainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(config), encoding="utf-8")
    return path


def canonical_json(config: TrainConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, indent=2)


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _format_validation_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err.get("loc", ())) or "<root>"
        parts.append(f"{loc}: {err.get('msg')}")
    return "Invalid configuration - " + "; ".join(parts)
