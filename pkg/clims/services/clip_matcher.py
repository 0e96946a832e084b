# clims/services/clip_matcher.py
"""
Adapter for a pretrained image-text model from the Hugging Face hub.

Masked images are resized to the model's input size and normalized with the
model's statistics before encoding. Parameters are frozen; gradients still
flow back to the input pixels.
"""

import logging

import torch
import torch.nn.functional as F

from clims.exceptions import MatcherError
from clims.utils.retry import retry_transient

logger = logging.getLogger(__name__)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@retry_transient(max_retries=3, backoff=2)
def _load_pretrained(model_id: str):
    from transformers import CLIPModel, CLIPTokenizer

    model = CLIPModel.from_pretrained(model_id)
    tokenizer = CLIPTokenizer.from_pretrained(model_id)
    return model, tokenizer


class PretrainedClipMatcher:
    def __init__(self, model_id: str = "openai/clip-vit-base-patch16", input_size: int | None = None):
        try:
            model, tokenizer = _load_pretrained(model_id)
        except ImportError as e:
            raise MatcherError("The pretrained matcher needs transformers (pip install transformers)") from e

        self.model_id = model_id
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.input_size = input_size or int(model.config.vision_config.image_size)
        self.dim = int(model.config.projection_dim)
        logger.info(f"Pretrained matcher {model_id} loaded (input {self.input_size}px, dim {self.dim})")

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        lead = images.shape[:-3]
        x = images.reshape(-1, *images.shape[-3:]).float()
        x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        mean = torch.tensor(CLIP_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(CLIP_STD, dtype=x.dtype).view(1, 3, 1, 1)
        feats = self.model.get_image_features(pixel_values=(x - mean) / std)
        feats = F.normalize(feats, dim=-1)
        return feats.to(images.dtype).reshape(*lead, -1)

    def encode_text(self, prompt: str) -> torch.Tensor:
        if not prompt or not prompt.strip():
            raise MatcherError("Prompt must be a nonempty string")
        tokens = self.tokenizer([prompt], padding=True, return_tensors="pt")
        with torch.no_grad():
            feats = self.model.get_text_features(**tokens)
        return F.normalize(feats, dim=-1)[0]
