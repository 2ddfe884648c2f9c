"""Encoders mapping pixels and prompts to embeddings and feature maps.

The builtin encoder is fully deterministic and CPU-only: prompts hash to a
color anchor, images embed through smooth random-Fourier features of their
color statistics, and both modalities share the same feature space, so an
image painted in a prompt's color aligns with that prompt's text embedding.
It exists so exports, the crop server, and CI run without any model weights.

``load_encoder("clip", checkpoint)`` returns the optional adapter around a
locally available CLIP checkpoint instead (see clip_encoder.py).
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from PIL import Image

# fixed basis seed: embeddings must be identical across machines and runs
_BASIS_SEED = 41925031
_FREQ_SCALE = 2.0  # low frequencies keep the embedding smooth in the stats


def prompt_color(prompt: str) -> np.ndarray:
    """RGB anchor in [0,1]^3 derived from the prompt text."""
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    return np.array(list(digest[:3]), dtype=np.float64) / 255.0


def image_to_array(image: Image.Image) -> np.ndarray:
    return np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0


def resize_square(image: Image.Image, side: int) -> Image.Image:
    return image.resize((side, side), Image.BOX)


def resize_long_side(image: Image.Image, long_side: int) -> Image.Image:
    w, h = image.size
    if w >= h:
        nw, nh = long_side, max(1, round(h * long_side / w))
    else:
        nw, nh = max(1, round(w * long_side / h)), long_side
    return image.resize((nw, nh), Image.BOX)


class BuiltinEncoder:
    """Deterministic pixel-statistics encoder."""

    name = "builtin"

    def __init__(self, embedding_dim: int = 64, feature_channels: int = 16,
                 feature_grid: tuple[int, int] = (8, 8)):
        self.embedding_dim = embedding_dim
        self.feature_channels = feature_channels
        self.feature_grid = feature_grid
        rng = np.random.default_rng(_BASIS_SEED)
        self._omega = rng.normal(0.0, _FREQ_SCALE, size=(embedding_dim, 6))
        self._phase = rng.uniform(0.0, 2.0 * math.pi, size=embedding_dim)
        self._proj = rng.normal(0.0, 1.0, size=(feature_channels, 3))

    # --- shared feature space ---------------------------------------------

    def _fourier(self, stats6: np.ndarray) -> np.ndarray:
        z = np.cos(self._omega @ stats6 + self._phase)
        return z / np.linalg.norm(z)

    @staticmethod
    def _stats(arr: np.ndarray) -> np.ndarray:
        """Whole-image and center-half mean color: invariant to resizing."""
        h, w = arr.shape[:2]
        y0, y1 = h // 4, h // 4 + max(1, h // 2)
        x0, x1 = w // 4, w // 4 + max(1, w // 2)
        return np.concatenate([
            arr.reshape(-1, 3).mean(axis=0),
            arr[y0:y1, x0:x1].reshape(-1, 3).mean(axis=0),
        ])

    # --- modality entry points ---------------------------------------------

    def encode_text(self, prompt: str) -> np.ndarray:
        rgb = prompt_color(prompt)
        return self._fourier(np.concatenate([rgb, rgb]))

    def encode_array(self, arr: np.ndarray) -> np.ndarray:
        return self._fourier(self._stats(arr))

    def encode_global(self, image: Image.Image, resolution: int = 640) -> np.ndarray:
        return self.encode_array(image_to_array(resize_square(image, resolution)))

    def encode_crop(self, image: Image.Image, box: tuple[int, int, int, int],
                    resize_long: int = 640) -> np.ndarray:
        crop = image.crop(box)
        return self.encode_array(image_to_array(resize_long_side(crop, resize_long)))

    def features(self, arr: np.ndarray) -> np.ndarray:
        """(Q, h, w) map of projected per-cell mean colors."""
        gh, gw = self.feature_grid
        h, w = arr.shape[:2]
        out = np.zeros((self.feature_channels, gh, gw))
        ys = [h * i // gh for i in range(gh + 1)]
        xs = [w * i // gw for i in range(gw + 1)]
        for gy in range(gh):
            for gx in range(gw):
                cell = arr[ys[gy]:max(ys[gy + 1], ys[gy] + 1),
                           xs[gx]:max(xs[gx + 1], xs[gx] + 1)]
                out[:, gy, gx] = self._proj @ cell.reshape(-1, 3).mean(axis=0)
        return out

def _view_seed(image_id: str, branch: str) -> int:
    digest = hashlib.sha256(f"{image_id}/{branch}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def weak_view(image: Image.Image, image_id: str, resolution: int = 640) -> np.ndarray:
    """Flip plus a mild seeded rescale, as pixels. One fixed view per image."""
    rng = np.random.default_rng(_view_seed(image_id, "weak"))
    flipped = image.transpose(Image.FLIP_LEFT_RIGHT)
    scale = float(rng.uniform(0.85, 1.0))
    inner = resize_square(flipped, max(8, int(resolution * scale)))
    return image_to_array(resize_square(inner, resolution))


def strong_view(image: Image.Image, image_id: str, resolution: int = 640) -> np.ndarray:
    """Weak view plus seeded color jitter."""
    arr = weak_view(image, image_id, resolution)
    rng = np.random.default_rng(_view_seed(image_id, "strong"))
    scale = rng.uniform(0.7, 1.3, size=3)
    shift = rng.uniform(-0.08, 0.08, size=3)
    return np.clip(arr * scale + shift, 0.0, 1.0)


def load_encoder(name: str, checkpoint: str | None = None, **kwargs):
    if name == "builtin":
        return BuiltinEncoder(**kwargs)
    if name == "clip":
        from .clip_encoder import ClipEncoder
        if checkpoint is None:
            raise ValueError("the clip encoder needs --checkpoint (a local model path)")
        return ClipEncoder(checkpoint)
    raise ValueError(f"unknown encoder {name!r}")
