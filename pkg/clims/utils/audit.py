# clims/utils/audit.py
import json
import logging
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)


def log_step(log_path: Path | None, event: str, details: dict | None = None, echo: bool = True) -> dict:
    """One JSON-lines row per training event; also mirrored to the logger."""
    entry = {
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "event": event,
        **(details or {}),
    }

    if echo:
        logger.info(f"TRAIN | {event} | {_compact(details or {})}")

    if log_path is not None:
        try:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        except OSError as e:
            logger.warning(f"Training log write failed ({log_path}): {e}")
    return entry


def read_log(log_path: Path) -> list[dict]:
    rows = []
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _compact(details: dict) -> str:
    parts = []
    for key, value in details.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.4g}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)
