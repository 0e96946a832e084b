# clims/models/backbone.py
"""
Feature extractors, the sigmoid activation head and the conventional CAM baseline.

Tensors are channel-first: images are (B, 3, H, W) or (3, H, W) with values in
[0, 1]; feature maps are (..., C, h, w); class weights are (C, K); activation
maps are (..., K, h, w).

tiny-cnn layer table (downsampling factor 4, 64x64 -> 32 x 16 x 16):

    layer  kernel  in -> out  stride  activation
    1      3x3     3  -> 16   1       ReLU
    2      3x3     16 -> 32   2       ReLU
    3      3x3     32 -> 32   2       ReLU
    4      3x3     32 -> 32   1       ReLU
"""

import logging
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from clims.exceptions import ModelNotReadyError, ShapeError

logger = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 8


# ────────────────────────────────
# Feature extractors
# ────────────────────────────────
class TinyBackbone(nn.Module):
    arch = "tiny-cnn"
    out_channels = 32
    stride = 4
    min_size = MIN_IMAGE_SIZE

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, stride=1, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 32, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(32, 32, 3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        return F.relu(self.conv4(x))

    @property
    def final_layer(self) -> nn.Conv2d:
        return self.conv4


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50 trunk up to layer3 (stride 16, 1024 channels)."""

    arch = "resnet50"
    out_channels = 1024
    stride = 16
    min_size = 32

    def __init__(self, pretrained: bool = False):
        super().__init__()
        try:
            from torchvision.models import ResNet50_Weights, resnet50
        except ImportError as e:
            raise ImportError("The resnet50 backbone needs torchvision (pip install torchvision)") from e

        net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V2 if pretrained else None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.Sequential(net.layer1, net.layer2, net.layer3)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.layers(self.stem(x))

    @property
    def final_layer(self) -> nn.Module:
        return self.layers[-1]


def build_backbone(arch: str = "tiny-cnn", **kwargs) -> nn.Module:
    if arch == "tiny-cnn":
        return TinyBackbone()
    if arch == "resnet50":
        return ResNet50Backbone(**kwargs)
    raise ValueError(f"Unknown backbone '{arch}' (expected 'tiny-cnn' or 'resnet50')")


def _as_batch(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if image.dim() == 3:
        return image.unsqueeze(0), True
    if image.dim() == 4:
        return image, False
    raise ShapeError(f"Expected an image of shape (3, H, W) or (B, 3, H, W), got {tuple(image.shape)}")


def check_image(image: torch.Tensor, min_size: int = MIN_IMAGE_SIZE) -> None:
    batch, _ = _as_batch(image)
    if batch.shape[1] != 3:
        raise ShapeError(f"Images must have 3 channels, got {batch.shape[1]}")
    h, w = batch.shape[-2:]
    if h < min_size or w < min_size:
        raise ShapeError(f"Image {h}x{w} is smaller than the minimum receptive size {min_size}x{min_size}")
    if not torch.isfinite(batch).all():
        raise ShapeError("Image contains non-finite values")
    if batch.numel() and (batch.min() < 0 or batch.max() > 1):
        raise ShapeError("Image values must lie within [0, 1]")


def forward_features(backbone: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Z = backbone(X). Accepts a single image or a batch."""
    check_image(image, getattr(backbone, "min_size", MIN_IMAGE_SIZE))
    batch, single = _as_batch(image)
    z = backbone(batch)
    return z[0] if single else z


# ────────────────────────────────
# Heads
# ────────────────────────────────
def _check_head_shapes(z: torch.Tensor, w: torch.Tensor) -> None:
    if w.dim() != 2:
        raise ShapeError(f"Class weights must be (C, K), got {tuple(w.shape)}")
    if z.dim() < 3:
        raise ShapeError(f"Feature map must be (..., C, h, w), got {tuple(z.shape)}")
    if z.shape[-3] != w.shape[0]:
        raise ShapeError(f"Channel mismatch: features have {z.shape[-3]} channels, weights expect {w.shape[0]}")


def stable_sigmoid(logits: torch.Tensor) -> torch.Tensor:
    # torch.sigmoid already branches on sign; the clamp keeps saturated values strictly inside (0, 1)
    finfo = torch.finfo(logits.dtype)
    return torch.sigmoid(logits).clamp(min=finfo.tiny, max=1.0 - finfo.eps)


def conventional_cam(z: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """P_k(h, w) = W_k^T Z(h, w), no nonlinearity."""
    _check_head_shapes(z, w)
    return torch.einsum("...chw,ck->...khw", z, w.to(z.dtype))


def activation_head(z: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """P_k(h, w) = sigmoid(W_k^T Z(h, w))."""
    return stable_sigmoid(conventional_cam(z, w))


def baseline_logits(z: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """GAP followed by the 1x1 classifier: y_k = W_k . mean_hw Z."""
    _check_head_shapes(z, w)
    return torch.einsum("...c,ck->...k", z.mean(dim=(-2, -1)), w.to(z.dtype))


def baseline_bce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Sigmoid cross entropy summed over classes; batches are averaged over images.
    """
    if logits.shape != labels.shape:
        raise ShapeError(f"Logits {tuple(logits.shape)} and labels {tuple(labels.shape)} differ")
    per_class = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="none")
    per_image = per_class.sum(dim=-1)
    return per_image.mean() if per_image.dim() else per_image


def upsample_maps(maps: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear (align_corners=False) resize of (..., K, h, w) maps to (height, width)."""
    if maps.dim() not in (3, 4):
        raise ShapeError(f"Maps must be (K, h, w) or (B, K, h, w), got {tuple(maps.shape)}")
    h, w = maps.shape[-2:]
    if height < h or width < w:
        raise ShapeError(f"Target size {height}x{width} is smaller than source {h}x{w}")
    if (height, width) == (h, w):
        return maps
    single = maps.dim() == 3
    batch = maps.unsqueeze(0) if single else maps
    out = F.interpolate(batch, size=(height, width), mode="bilinear", align_corners=False)
    return out[0] if single else out


# ────────────────────────────────
# Full network
# ────────────────────────────────
class CAMNet(nn.Module):
    """Backbone + bias-free 1x1 classifier W (C x K)."""

    def __init__(self, num_classes: int, arch: str = "tiny-cnn", **backbone_kwargs):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.arch = arch
        self.num_classes = num_classes
        self.backbone = build_backbone(arch, **backbone_kwargs)
        self.classifier = nn.Conv2d(self.backbone.out_channels, num_classes, 1, bias=False)
        self.ready = False

    @property
    def class_weights(self) -> torch.Tensor:
        return self.classifier.weight.view(self.num_classes, -1).t()

    def init_parameters(self, seed: int) -> "CAMNet":
        """Seeded He-normal init for convolutions, small normal init for W."""
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.backbone.modules():
                if isinstance(module, nn.Conv2d):
                    fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                    std = (2.0 / fan_in) ** 0.5
                    module.weight.copy_(torch.randn(module.weight.shape, generator=g) * std)
                    if module.bias is not None:
                        module.bias.zero_()
            self.classifier.weight.copy_(torch.randn(self.classifier.weight.shape, generator=g) * 0.01)
        self.ready = True
        return self

    def require_ready(self) -> None:
        if not self.ready:
            raise ModelNotReadyError("Model parameters are not initialized; train or load a checkpoint first")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return forward_features(self.backbone, x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return activation_head(self.features(x), self.class_weights)

    def cam(self, x: torch.Tensor) -> torch.Tensor:
        return conventional_cam(self.features(x), self.class_weights)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return baseline_logits(self.features(x), self.class_weights)


def build_model(num_classes: int, arch: str = "tiny-cnn", seed: Optional[int] = None) -> CAMNet:
    model = CAMNet(num_classes, arch)
    if seed is not None:
        model.init_parameters(seed)
    logger.debug(f"Built {arch} CAMNet with {num_classes} classes")
    return model
