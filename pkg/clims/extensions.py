# clims/extensions.py
import logging
import random
from contextlib import contextmanager
from typing import Iterator, Optional

import numpy as np
import torch
from dotenv import load_dotenv

from clims.core.config import get_settings

load_dotenv()

logger = logging.getLogger(__name__)

_logging_configured = False


# ────────────────────────────────
# Logging setup
# ────────────────────────────────
def setup_logging(level: str | int = "INFO") -> None:
    global _logging_configured
    log_level = logging.getLevelName(level.upper()) if isinstance(level, str) else level
    if not isinstance(log_level, int):
        log_level = logging.INFO

    if not _logging_configured:
        logging.basicConfig(
            level=log_level,
            format="%(asctime)s %(levelname)s %(name)s %(message)s",
            handlers=[logging.StreamHandler()],
        )
        _logging_configured = True
    logging.getLogger().setLevel(log_level)
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logger.debug(f"Logging configured at level: {logging.getLevelName(log_level)}")


# ────────────────────────────────
# Threads / determinism
# ────────────────────────────────
def configure_threads(num_workers: Optional[int] = None) -> int:
    """Cap torch intra-op parallelism; falls back to CLIMS_NUM_WORKERS."""
    if num_workers is None:
        num_workers = get_settings().NUM_WORKERS
    if num_workers is not None and num_workers >= 1:
        torch.set_num_threads(num_workers)
        logger.debug(f"torch threads capped at {num_workers}")
    return torch.get_num_threads()


def set_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled, warn_only=False)
    if enabled:
        # Reductions in a fixed order need a single intra-op thread
        torch.set_num_threads(1)
        logger.info("Deterministic mode on (single thread, deterministic kernels)")


@contextmanager
def determinism(enabled: bool) -> Iterator[None]:
    """Deterministic kernels for the block; the previous kernel mode and thread count come back afterwards."""
    previous = (
        torch.are_deterministic_algorithms_enabled(),
        torch.is_deterministic_algorithms_warn_only_enabled(),
        torch.get_num_threads(),
    )
    if enabled:
        set_determinism(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous[0], warn_only=previous[1])
        torch.set_num_threads(previous[2])


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)
