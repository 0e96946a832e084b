# clims/pipeline/schedule.py
import math


def lr_at(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing, evaluated per optimizer step."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} is outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
