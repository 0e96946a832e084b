from clims.pipeline.checkpoint import (
    TrainState,
    load_checkpoint,
    model_from_state,
    parameter_checksum,
    save_checkpoint,
)
from clims.pipeline.schedule import lr_at
from clims.pipeline.train import Batch, cls_train_step, train, train_step

__all__ = [
    "Batch",
    "TrainState",
    "cls_train_step",
    "load_checkpoint",
    "lr_at",
    "model_from_state",
    "parameter_checksum",
    "save_checkpoint",
    "train",
    "train_step",
]
