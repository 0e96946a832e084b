from clims.models.backbone import (
    CAMNet,
    TinyBackbone,
    activation_head,
    baseline_bce_loss,
    baseline_logits,
    build_backbone,
    build_model,
    conventional_cam,
    forward_features,
    upsample_maps,
)

__all__ = [
    "CAMNet",
    "TinyBackbone",
    "activation_head",
    "baseline_bce_loss",
    "baseline_logits",
    "build_backbone",
    "build_model",
    "conventional_cam",
    "forward_features",
    "upsample_maps",
]
