"""Class activation maps, thresholded boxes, and adaptive local-view budgets.

A class activation map weights feature-map channels by the classifier head's
weights for that class. The normalized map is thresholded, a single tight box
covers every passing grid cell, and the box is expanded/perturbed in pixel
space to produce the image's local views.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from string-able parts. Never uses Python hash()."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class FeatureMapTensor:
    image_id: str
    values: np.ndarray        # (Q, h, w)
    width_px: int
    height_px: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"feature map must be (Q, h, w), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"non-finite feature map for image {self.image_id!r}")
        if min(self.values.shape[1:]) < 1:
            raise DataError("feature grid must be at least 1x1")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass
class ActivationMap:
    values: np.ndarray  # (h, w)
    class_index: int
    normalized: bool = False

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"activation map must be 2-D, got {self.values.shape}")
        if self.normalized and self.values.size:
            vmax = self.values.max()
            if self.values.min() < 0 or vmax > 1 or not (vmax == 1.0 or np.all(self.values == 0.0)):
                raise DataError("normalized map must lie in [0,1] with max 1 (or be all zero)")


@dataclass(frozen=True)
class PixelBox:
    """Half-open pixel box [x0, x1) x [y0, y1) with provenance."""

    x0: int
    y0: int
    x1: int
    y1: int
    class_index: int = -1
    kind: str = "base"          # base | perturbed
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DataError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")
        if self.x0 < 0 or self.y0 < 0:
            raise DataError(f"negative box corner {(self.x0, self.y0)}")

    @property
    def coords(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class ViewSet:
    image_id: str
    boxes: list[PixelBox] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.boxes)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "n": self.n,
            "boxes": [
                {"box": list(b.coords), "class": b.class_index, "kind": b.kind}
                for b in self.boxes
            ],
        }


@dataclass
class ViewConfig:
    cam_threshold: float = 0.95
    classifier_threshold: float = 0.5
    offset_px: int = 80
    perturb_k: int = 2
    views_cap: int | None = None  # None -> number of classes

    def __post_init__(self) -> None:
        from .errors import ConfigError
        if not (0.0 < self.cam_threshold <= 1.0):
            raise ConfigError(f"cam_threshold must be in (0, 1], got {self.cam_threshold}")
        if not (0.0 <= self.classifier_threshold <= 1.0):
            raise ConfigError(f"classifier_threshold must be in [0, 1], got {self.classifier_threshold}")
        if self.offset_px < 0:
            raise ConfigError(f"offset_px must be >= 0, got {self.offset_px}")
        if self.perturb_k < 0:
            raise ConfigError(f"perturb_k must be >= 0, got {self.perturb_k}")
        if self.views_cap is not None and self.views_cap < 0:
            raise ConfigError(f"views_cap must be >= 0, got {self.views_cap}")


def compute_cam(fm: FeatureMapTensor, head_weights: np.ndarray, class_index: int) -> ActivationMap:
    """Channel-weighted sum of the feature map for one class."""
    w = np.asarray(head_weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != fm.channels:
        raise DataError(
            f"head weights {w.shape} incompatible with {fm.channels}-channel feature map"
        )
    if not (0 <= class_index < w.shape[0]):
        raise DataError(f"class index {class_index} out of range")
    cam = np.tensordot(w[class_index], fm.values, axes=(0, 0))
    return ActivationMap(values=cam, class_index=class_index, normalized=False)


def normalize_map(m: ActivationMap) -> ActivationMap:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros."""
    v = m.values
    vmin, vmax = v.min(), v.max()
    if vmax == vmin:
        out = np.zeros_like(v)
    else:
        out = (v - vmin) / (vmax - vmin)
    return ActivationMap(values=out, class_index=m.class_index, normalized=True)


def extract_box(m: ActivationMap, cam_threshold: float,
                image_dims: tuple[int, int]) -> PixelBox | None:
    """Tight pixel box over all grid cells >= threshold; None if nothing passes.

    Grid cells are assumed to tile the image uniformly; fractional cell edges
    round outward (floor left/top, ceil right/bottom) to preserve coverage.
    """
    if not m.normalized:
        raise DataError("extract_box needs a normalized activation map")
    width_px, height_px = image_dims
    h, w = m.values.shape
    ys, xs = np.nonzero(m.values >= cam_threshold)
    if len(xs) == 0:
        return None
    cx0, cx1 = int(xs.min()), int(xs.max()) + 1   # half-open in cells
    cy0, cy1 = int(ys.min()), int(ys.max()) + 1
    x0 = int(np.floor(cx0 * width_px / w))
    x1 = int(np.ceil(cx1 * width_px / w))
    y0 = int(np.floor(cy0 * height_px / h))
    y1 = int(np.ceil(cy1 * height_px / h))
    return PixelBox(x0=x0, y0=y0, x1=min(x1, width_px), y1=min(y1, height_px),
                    class_index=m.class_index, kind="base")


def _clip_box(x0: int, y0: int, x1: int, y1: int,
              image_dims: tuple[int, int]) -> tuple[int, int, int, int]:
    width_px, height_px = image_dims
    return (max(0, min(x0, width_px)), max(0, min(y0, height_px)),
            max(0, min(x1, width_px)), max(0, min(y1, height_px)))


def perturb_boxes(base: PixelBox, offset_px: int, k: int, seed: int,
                  image_dims: tuple[int, int]) -> list[PixelBox]:
    """The outward-expanded box followed by k independently jittered copies.

    Each jittered coordinate shifts by a uniform integer in [-offset, +offset].
    Jitters that clip to zero area are resampled up to 8 times, then skipped.
    """
    if offset_px < 0 or k < 0:
        raise DataError("offset_px and k must be non-negative")
    out: list[PixelBox] = []
    ex = _clip_box(base.x0 - offset_px, base.y0 - offset_px,
                   base.x1 + offset_px, base.y1 + offset_px, image_dims)
    out.append(PixelBox(*ex, class_index=base.class_index, kind="base", seed=seed))
    rng = np.random.default_rng(seed)
    for _ in range(k):
        for _attempt in range(8):
            dx0, dy0, dx1, dy1 = rng.integers(-offset_px, offset_px + 1, size=4)
            cx0, cy0, cx1, cy1 = _clip_box(base.x0 + int(dx0), base.y0 + int(dy0),
                                           base.x1 + int(dx1), base.y1 + int(dy1),
                                           image_dims)
            if cx0 < cx1 and cy0 < cy1:
                out.append(PixelBox(cx0, cy0, cx1, cy1,
                                    class_index=base.class_index, kind="perturbed",
                                    seed=seed))
                break
    return out


def select_classes(head_probs: np.ndarray, classifier_threshold: float) -> list[int]:
    """Indices whose probability strictly exceeds the threshold, ascending."""
    p = np.asarray(head_probs, dtype=np.float64)
    if p.ndim != 1:
        raise DataError(f"head_probs must be 1-D, got {p.shape}")
    if p.size and (p.min() < 0 or p.max() > 1):
        raise DataError("head_probs outside [0, 1]")
    return [int(i) for i in np.nonzero(p > classifier_threshold)[0]]


def propose_views(fm: FeatureMapTensor, head_weights: np.ndarray,
                  head_probs: np.ndarray, cfg: ViewConfig, global_seed: int = 0) -> ViewSet:
    """Local views for one image: one expanded plus k perturbed boxes per
    above-threshold class, truncated to the view cap.

    More confident classes on an image mean more views, so complex images get
    a larger budget than simple ones.
    """
    n_classes = np.asarray(head_weights).shape[0]
    cap = cfg.views_cap if cfg.views_cap is not None else n_classes
    boxes: list[PixelBox] = []
    dims = (fm.width_px, fm.height_px)
    for c in select_classes(head_probs, cfg.classifier_threshold):
        cam = normalize_map(compute_cam(fm, head_weights, c))
        base = extract_box(cam, cfg.cam_threshold, dims)
        if base is None:
            continue
        seed = derive_seed(global_seed, fm.image_id, c)
        boxes.extend(perturb_boxes(base, cfg.offset_px, cfg.perturb_k, seed, dims))
    return ViewSet(image_id=fm.image_id, boxes=boxes[:cap])
