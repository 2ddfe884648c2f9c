"""Optional adapter around a locally available CLIP checkpoint.

Imports torch/transformers lazily; install with ``pip install
ccd-exporter[clip]`` and pass a local checkpoint directory. Global embeddings
and crop embeddings share the model's preprocessing; feature maps are the
vision tower's patch token activations reshaped to (hidden, grid, grid).
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image

from .encoders import image_to_array, resize_long_side, resize_square


class ClipEncoder:
    name = "clip"

    def __init__(self, checkpoint: str):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self.model = CLIPModel.from_pretrained(checkpoint)
        self.model.eval()
        self.processor = CLIPProcessor.from_pretrained(checkpoint)
        self.embedding_dim = int(self.model.config.projection_dim)
        vision = self.model.config.vision_config
        side = vision.image_size // vision.patch_size
        self.feature_grid = (side, side)
        self.feature_channels = int(vision.hidden_size)

    def _image_features(self, arr: np.ndarray):
        pil = Image.fromarray((arr * 255).astype(np.uint8))
        return self.processor(images=pil, return_tensors="pt")

    def encode_text(self, prompt: str) -> np.ndarray:
        with self._torch.no_grad():
            tokens = self.processor(text=[prompt], return_tensors="pt", padding=True)
            feats = self.model.get_text_features(**tokens)[0]
            feats = feats / feats.norm()
        return feats.numpy().astype(np.float64)

    def encode_array(self, arr: np.ndarray) -> np.ndarray:
        with self._torch.no_grad():
            feats = self.model.get_image_features(**self._image_features(arr))[0]
            feats = feats / feats.norm()
        return feats.numpy().astype(np.float64)

    def encode_global(self, image: Image.Image, resolution: int = 640) -> np.ndarray:
        return self.encode_array(image_to_array(resize_square(image, resolution)))

    def encode_crop(self, image: Image.Image, box, resize_long: int = 640) -> np.ndarray:
        crop = image.crop(box)
        return self.encode_array(image_to_array(resize_long_side(crop, resize_long)))

    def features(self, arr: np.ndarray) -> np.ndarray:
        with self._torch.no_grad():
            out = self.model.vision_model(**self._image_features(arr))
            tokens = out.last_hidden_state[0, 1:, :]  # drop CLS
        side = int(math.isqrt(tokens.shape[0]))
        return tokens.numpy().astype(np.float64).reshape(side, side, -1).transpose(2, 0, 1)
