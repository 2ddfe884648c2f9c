"""Toy image generator for demos and CI.

Paints one image per class filled with that class prompt's anchor color plus
a soft radial highlight, so the builtin encoder scores it closest to its own
class text embedding.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import prompt_color
from .export import DEFAULT_TEMPLATE, apply_template


def make_toy_images(out_dir: str | Path, class_names: list[str],
                    template: str = DEFAULT_TEMPLATE,
                    size: tuple[int, int] = (640, 640)) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    w, h = size
    yy, xx = np.mgrid[0:h, 0:w]
    radial = np.exp(-(((xx - w / 2) / (w / 2)) ** 2 + ((yy - h / 2) / (h / 2)) ** 2))
    paths = []
    for name in class_names:
        rgb = prompt_color(apply_template(template, name))
        arr = np.tile(rgb, (h, w, 1))
        arr = np.clip(arr * (0.92 + 0.08 * radial[..., None]), 0.0, 1.0)
        path = out_dir / f"toy_{name}.png"
        Image.fromarray((arr * 255).astype(np.uint8)).save(path)
        paths.append(path)
    return paths
