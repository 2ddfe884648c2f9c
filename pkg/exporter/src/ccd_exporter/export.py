"""One-shot dataset export: embeddings, feature maps, manifest.

Walks an image directory, runs the chosen encoder, and writes the engine's
manifest + CCDT layout. All image-space work (decode, resize, augment) lives
here; the engine never sees pixels. Unreadable images are skipped with a
warning and excluded from the manifest.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import ccdt
from .encoders import image_to_array, resize_square, strong_view, weak_view

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
DEFAULT_TEMPLATE = "a photo of the [class name]"


def apply_template(template: str, class_name: str) -> str:
    return template.replace("[class name]", class_name)


@dataclass
class ExportJob:
    image_dir: Path
    class_names: list[str]
    out_dir: Path
    template: str = DEFAULT_TEMPLATE
    global_resolution: int = 640
    resize_long: int = 640
    encoder_name: str = "builtin"
    checkpoint: str | None = None
    augmented_views: bool = True
    encoder_opts: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.image_dir = Path(self.image_dir)
        self.out_dir = Path(self.out_dir)
        if not self.class_names:
            raise ValueError("class list must not be empty")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")


def export_dataset(job: ExportJob, encoder=None) -> dict:
    """Run the export; returns the manifest document."""
    from .encoders import load_encoder

    if encoder is None:
        encoder = load_encoder(job.encoder_name, job.checkpoint, **job.encoder_opts)

    tensors = job.out_dir / "tensors"
    tensors.mkdir(parents=True, exist_ok=True)

    prompts = [apply_template(job.template, name) for name in job.class_names]
    text = np.stack([encoder.encode_text(p) for p in prompts])
    ccdt.write(tensors / "text.ccdt", text)

    records = []
    sources: dict[str, str] = {}
    paths = sorted(p for p in job.image_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    for path in paths:
        image_id = path.stem
        try:
            with Image.open(path) as handle:
                image = handle.convert("RGB")
        except (OSError, UnidentifiedImageError) as exc:
            print(f"warning: skipping unreadable image {path}: {exc}", file=sys.stderr)
            continue

        emb = encoder.encode_global(image, job.global_resolution)
        base_arr = image_to_array(resize_square(image, job.global_resolution))
        fm = encoder.features(base_arr)

        emb_rel = f"tensors/emb_{image_id}.ccdt"
        fm_rel = f"tensors/fm_{image_id}.ccdt"
        ccdt.write(job.out_dir / emb_rel, emb)
        ccdt.write(job.out_dir / fm_rel, fm)
        record = {
            "image_id": image_id,
            "width_px": image.width,
            "height_px": image.height,
            "global_embedding_path": emb_rel,
            "feature_map_path": fm_rel,
        }
        if job.augmented_views:
            weak_rel = f"tensors/weak_{image_id}.ccdt"
            strong_rel = f"tensors/strong_{image_id}.ccdt"
            ccdt.write(job.out_dir / weak_rel,
                       encoder.features(weak_view(image, image_id, job.global_resolution)))
            ccdt.write(job.out_dir / strong_rel,
                       encoder.features(strong_view(image, image_id, job.global_resolution)))
            record["weak_feature_path"] = weak_rel
            record["strong_feature_path"] = strong_rel
        records.append(record)
        sources[image_id] = str(path.resolve())

    manifest = {
        "class_names": list(job.class_names),
        "embedding_dim": int(text.shape[1]),
        "feature_channels": int(encoder.feature_channels),
        "feature_grid": list(encoder.feature_grid),
        "text_embedding_path": "tensors/text.ccdt",
        "image_records": records,
    }
    (job.out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    (job.out_dir / "export_meta.json").write_text(json.dumps({
        "encoder": getattr(encoder, "name", job.encoder_name),
        "checkpoint": job.checkpoint,
        "template": job.template,
        "global_resolution": job.global_resolution,
        "resize_long": job.resize_long,
        "embedding_dim": int(text.shape[1]),
        "sources": sources,
    }, sort_keys=True, indent=2) + "\n")
    return manifest
