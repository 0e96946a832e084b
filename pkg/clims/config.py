# clims/config.py
"""
Shared constants. Anything tunable per run lives in clims.core.config instead.
"""

DEFAULT_PROMPT_TEMPLATE = "a photo of {}"

# Class-related background sets, only for the categories they were published for.
# Every other class gets an empty list (no suppression terms).
BACKGROUND_SETS_VERSION = "v1"
PUBLISHED_BACKGROUND_SETS = {
    "train": ["railroad", "railway", "tree"],
    "boat": ["river", "sea", "lake"],
}

# Loss weights α, β, γ, δ
DEFAULT_LOSS_WEIGHTS = (10.0, 25.0, 29.5, 1.15)

LOSS_TERMS = ("otm", "btm", "cbs", "reg")
CLS_TERM = "cls"

# Training defaults
DEFAULT_LEARNING_RATE = 0.00025
DEFAULT_WEIGHT_DECAY = 0.0001
DEFAULT_MOMENTUM = 0.9
DEFAULT_EPOCHS = 10
DEFAULT_BATCH_SIZE = 16
DEFAULT_CROP_SIZE = 64
DEFAULT_CLAMP_EPSILON = 1e-4

# Evaluation
BG_THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))  # 0.05 .. 0.95

# Synthetic matcher
NULL_NORM_THRESHOLD = 1e-8
DEFAULT_EMBED_DIM = 16

# File names inside dataset / run directories
MANIFEST_FILE = "manifest.json"
SPEC_FILE = "spec.json"
CONCEPTS_FILE = "concepts.json"
TRAIN_LOG_FILE = "train_log.jsonl"
