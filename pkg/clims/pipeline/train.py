# clims/pipeline/train.py
"""
Training loop: backbone -> upsample -> mask-out -> matcher similarities ->
weighted objective -> SGD step at the cosine-annealed learning rate.

Randomness: one torch.Generator per epoch, seeded from (seed, epoch), drives
shuffling, random crops and flips. A run resumed from the epoch-e checkpoint
therefore sees exactly the batches an uninterrupted run would.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import torch

from clims.config import TRAIN_LOG_FILE
from clims.core.config import TrainConfig, save_config
from clims.core.prompts import PromptBook
from clims.exceptions import DatasetError, NonFiniteLossError, ShapeError
from clims.extensions import determinism, seed_everything
from clims.losses import LossBreakdown, clims_batch_loss
from clims.models.backbone import CAMNet, baseline_bce_loss, build_model, upsample_maps
from clims.pipeline.checkpoint import (
    TrainState,
    build_optimizer,
    capture_state,
    load_checkpoint,
    model_from_state,
    parameter_checksum,
    save_checkpoint,
)
from clims.pipeline.schedule import lr_at
from clims.services.matcher import Matcher, PromptEmbeddings, embed_prompt_book
from clims.utils.audit import log_step

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, crop, crop)
    labels: torch.Tensor  # (B, K)
    indices: torch.Tensor  # (B,) dataset indices


# ────────────────────────────────
# Batching / augmentation
# ────────────────────────────────
def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + epoch)


def augment(images: torch.Tensor, crop_size: int, generator: torch.Generator) -> torch.Tensor:
    """Random crop to crop_size and random horizontal flip, per image."""
    height, width = images.shape[-2:]
    if height < crop_size or width < crop_size:
        raise ShapeError(f"Images {height}x{width} are smaller than the crop size {crop_size}")
    out = []
    for image in images:
        top = int(torch.randint(0, height - crop_size + 1, (1,), generator=generator))
        left = int(torch.randint(0, width - crop_size + 1, (1,), generator=generator))
        flip = bool(torch.randint(0, 2, (1,), generator=generator))
        patch = image[:, top:top + crop_size, left:left + crop_size]
        out.append(torch.flip(patch, dims=(-1,)) if flip else patch)
    return torch.stack(out)


def iterate_batches(dataset, config: TrainConfig, epoch: int) -> Iterator[Batch]:
    generator = epoch_generator(config.seed, epoch)
    order = torch.randperm(len(dataset), generator=generator)
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        images = augment(dataset.images[idx], config.crop_size, generator)
        yield Batch(images=images, labels=dataset.labels[idx], indices=idx)


def steps_per_epoch(num_items: int, batch_size: int) -> int:
    return -(-num_items // batch_size)


# ────────────────────────────────
# Single steps
# ────────────────────────────────
def _restrict(breakdown: LossBreakdown, terms: Sequence[str]) -> LossBreakdown:
    """Report inactive terms as zero; their weight is zero, so the total is unchanged."""
    zero = torch.zeros((), dtype=breakdown.total.dtype)
    return LossBreakdown(
        otm=breakdown.otm if "otm" in terms else zero,
        btm=breakdown.btm if "btm" in terms else zero,
        cbs=breakdown.cbs if "cbs" in terms else zero,
        reg=breakdown.reg if "reg" in terms else zero,
        total=breakdown.total,
        areas=breakdown.areas,
    )


def compute_objective(model: CAMNet, batch: Batch, embeddings: Optional[PromptEmbeddings],
                      matcher: Optional[Matcher], config: TrainConfig) -> LossBreakdown:
    labels = batch.labels.to(torch.float32)
    if config.objective == "cls":
        logits = model.logits(batch.images)
        return LossBreakdown.for_classifier(baseline_bce_loss(logits, labels), model.num_classes)
    height, width = batch.images.shape[-2:]
    maps = upsample_maps(model(batch.images), height, width)
    breakdown = clims_batch_loss(
        batch.images, labels, maps, embeddings, matcher,
        config.effective_weights(), eps=config.similarity_clamp_epsilon,
    )
    return _restrict(breakdown, config.losses)


def _apply_step(model: CAMNet, optimizer: torch.optim.SGD, batch: Batch, embeddings, matcher,
                config: TrainConfig, step: int, lr: float) -> Tuple[LossBreakdown, Optional[float]]:
    """
    One SGD step. Returns the loss breakdown and, when clipping is on, the
    gradient norm measured before clipping.
    """
    for group in optimizer.param_groups:
        group["lr"] = lr

    model.train()
    breakdown = compute_objective(model, batch, embeddings, matcher, config)
    if not breakdown.is_finite():
        raise NonFiniteLossError(
            f"Non-finite loss at step {step} (lr={lr:.3g})",
            diagnostics={
                "step": step,
                "batch_indices": batch.indices.tolist(),
                "breakdown": breakdown.to_record(),
                "lr": lr,
            },
        )

    optimizer.zero_grad(set_to_none=False)
    breakdown.total.backward()
    grad_norm = None
    if config.grad_clip_norm is not None:
        grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm))
    # decoupled decay on the pre-step parameters, then the momentum update
    if config.weight_decay:
        with torch.no_grad():
            for p in model.parameters():
                p.mul_(1.0 - lr * config.weight_decay)
    optimizer.step()
    return breakdown, grad_norm


def _embed(prompt_book: Optional[PromptBook], matcher: Optional[Matcher], config: TrainConfig):
    if config.objective == "cls":
        return None
    if prompt_book is None or matcher is None:
        raise DatasetError("The matching objective needs a prompt book and a matcher")
    return embed_prompt_book(matcher, prompt_book)


def train_step(state: TrainState, batch: Batch, prompt_book: Optional[PromptBook], matcher: Optional[Matcher],
               config: TrainConfig, total_steps: Optional[int] = None) -> Tuple[TrainState, LossBreakdown]:
    """
    One optimizer step on a captured state. `total_steps` is the cosine
    horizon; without it the step runs at the initial learning rate.
    """
    model = model_from_state(state)
    optimizer = build_optimizer(model, config, state)
    if total_steps is None:
        lr = config.learning_rate
    else:
        lr = lr_at(state.step, total_steps, config.learning_rate)
    breakdown, _ = _apply_step(model, optimizer, batch, _embed(prompt_book, matcher, config), matcher,
                               config, state.step, lr)
    new_state = capture_state(model, optimizer, config, state.class_names, state.epoch, state.step + 1)
    return new_state, breakdown


def cls_train_step(state: TrainState, batch: Batch, config: TrainConfig,
                   total_steps: Optional[int] = None) -> Tuple[TrainState, LossBreakdown]:
    """Classification-baseline step (sigmoid cross entropy on GAP logits)."""
    if config.objective != "cls":
        config = config.with_overrides(losses="cls")
    return train_step(state, batch, None, None, config, total_steps)


def initial_state(config: TrainConfig, class_names: Sequence[str]) -> TrainState:
    model = build_model(len(class_names), config.backbone, seed=config.seed)
    return capture_state(model, None, config, class_names, epoch=0, step=0)


# ────────────────────────────────
# Full run
# ────────────────────────────────
def checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return Path(out_dir) / CHECKPOINT_DIR / f"epoch_{epoch:03d}.ckpt"


def train(
    config: TrainConfig,
    dataset,
    prompt_book: Optional[PromptBook],
    matcher: Optional[Matcher],
    out_dir,
    epochs: Optional[int] = None,
    resume_from=None,
) -> Path:
    """
    Train and return the path of the last checkpoint.

    `epochs` overrides config.epochs (0 writes only the initial checkpoint).
    `resume_from` continues from a checkpoint written by an earlier run.
    Inputs are validated before anything is written to `out_dir`.
    """
    out_dir = Path(out_dir)
    total_epochs = config.epochs if epochs is None else epochs
    if total_epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {total_epochs}")
    if len(dataset) == 0:
        raise DatasetError("Cannot train on an empty dataset")
    height, width = dataset.images.shape[-2:]
    if config.crop_size > min(height, width):
        raise ShapeError(f"Crop size {config.crop_size} exceeds the {height}x{width} dataset images")
    if prompt_book is not None:
        prompt_book.check_classes(dataset.class_names)
    embeddings = _embed(prompt_book, matcher, config)

    state = None
    if resume_from is not None:
        state = load_checkpoint(resume_from, expected_config=config)
        if state.class_names != list(dataset.class_names):
            raise DatasetError(f"Checkpoint classes {state.class_names} differ from dataset {dataset.class_names}")

    with determinism(config.deterministic):
        seed_everything(config.seed)
        return _run(config, dataset, embeddings, matcher, out_dir, total_epochs, state, resume_from)


def _run(config: TrainConfig, dataset, embeddings, matcher, out_dir: Path, total_epochs: int,
         state: Optional[TrainState], resume_from) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.json")
    log_path = out_dir / TRAIN_LOG_FILE

    if state is not None:
        logger.info(f"Resuming from {resume_from} at epoch {state.epoch}, step {state.step}")
    else:
        log_path.unlink(missing_ok=True)
        state = initial_state(config, dataset.class_names)
        save_checkpoint(state, checkpoint_path(out_dir, 0))
        log_step(log_path, "init", {"epoch": 0, "checksum": parameter_checksum(state), "objective": config.objective})

    path = checkpoint_path(out_dir, state.epoch)
    model = model_from_state(state)
    optimizer = build_optimizer(model, config, state)
    per_epoch = steps_per_epoch(len(dataset), config.batch_size)
    total_steps = max(total_epochs * per_epoch, 1)
    step = state.step

    logger.info(
        f"Training {config.objective} ({','.join(config.losses)}) for {total_epochs} epochs, "
        f"{per_epoch} steps/epoch, {len(dataset)} images"
    )
    for epoch in range(state.epoch, total_epochs):
        totals = []
        for batch in iterate_batches(dataset, config, epoch):
            lr = lr_at(step, total_steps, config.learning_rate)
            breakdown, grad_norm = _apply_step(model, optimizer, batch, embeddings, matcher, config, step, lr)
            step += 1
            record = {"epoch": epoch + 1, "step": step, "lr": lr, **breakdown.to_record()}
            if grad_norm is not None:
                record["grad_norm"] = grad_norm
            log_step(log_path, "step", record, echo=step % config.log_every == 0)
            totals.append(record["total"])

        state = capture_state(model, optimizer, config, dataset.class_names, epoch=epoch + 1, step=step)
        path = save_checkpoint(state, checkpoint_path(out_dir, epoch + 1))
        log_step(log_path, "epoch", {
            "epoch": epoch + 1,
            "mean_total": sum(totals) / len(totals),
            "checksum": parameter_checksum(state),
        })

    logger.info(f"Training finished: {path}")
    return path
