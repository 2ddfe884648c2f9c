"""Synthetic worlds with known ground truth for every pipeline stage.

A world plants, per image: the present classes with one ground-truth box
each, a dominant class whose top-1 softmax probability is steered to that
class's planted bias value, and Gaussian feature blobs inside the boxes.
Global embeddings are constructed so that cosine similarity against the
class prototypes reproduces the planted probability row exactly (the
similarity vector is realized by solving the prototype Gram system), which
makes bias estimation, calibration, and label quality all checkable against
known values.

Also hosts the four proof-of-concept box policies (around GT / GT / random /
uniform grid) used by the policy-ordering study.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .cam_views import PixelBox, derive_seed
from .errors import ConfigError, DataError
from .tensor_store import write_tensor

BACKGROUND = -1  # pseudo class index for the background prototype


@dataclass
class WorldSpec:
    seed: int = 0
    n_classes: int = 10
    n_images: int = 200
    embedding_dim: int = 32
    feature_channels: int = 16
    feature_grid: tuple[int, int] = (8, 8)
    image_width: int = 640
    image_height: int = 640
    bias_profile: list[float] | None = None   # planted b*, len C, entries in (0, 1]
    label_noise: float = 0.02                 # bounded uniform noise on top-1 prob
    confusion_rate: float = 0.25              # chance a mass-carrying runner-up is absent
    hidden_rate: float = 0.35                 # chance of an extra present class with no mass
    multilabel: bool = True                   # False -> one present class per image
    tau: float = 0.01
    sim_peak: float = 0.25                    # cosine assigned to the top class
    box_size_range: tuple[int, int] = (140, 280)
    blob_amplitude: float = 6.0
    feature_noise: float = 0.02
    crop_noise: float = 0.02                  # provider-side embedding noise scale
    background_mass: float = 0.001            # probability spread over absent classes

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.n_classes + 1 > self.embedding_dim:
            raise ConfigError(
                f"infeasible: {self.n_classes}+1 prototypes need embedding_dim > n_classes,"
                f" got {self.embedding_dim}"
            )
        if self.n_classes > self.feature_channels:
            raise ConfigError("infeasible: need feature_channels >= n_classes")
        if self.bias_profile is None:
            self.bias_profile = [0.9] * self.n_classes
        if len(self.bias_profile) != self.n_classes:
            raise ConfigError("bias_profile length must equal n_classes")
        if any(not (0.0 < b <= 1.0) for b in self.bias_profile):
            raise ConfigError("bias_profile entries must be in (0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        lo, hi = self.box_size_range
        if not (8 <= lo <= hi <= min(self.image_width, self.image_height)):
            raise ConfigError(f"bad box_size_range {self.box_size_range}")


@dataclass
class WorldImage:
    image_id: str
    width: int
    height: int
    present: list[int]
    dominant: int
    confused: list[int]                      # classes with planted false mass
    boxes: dict[int, tuple[int, int, int, int]]  # class -> (x0, y0, x1, y1)
    target_probs: list[float]                # exact planted softmax row


@dataclass
class SyntheticWorld:
    spec: WorldSpec
    prototypes: np.ndarray        # (C, D) unit rows, the class text embeddings
    background: np.ndarray        # (D,) unit background prototype
    signatures: np.ndarray        # (C, Q) unit feature-channel signatures
    images: list[WorldImage] = field(default_factory=list)
    embeddings: np.ndarray | None = None  # (n, D), filled by generate_world

    def class_names(self) -> list[str]:
        return [f"class_{i:02d}" for i in range(self.spec.n_classes)]

    def to_json(self) -> dict:
        return {
            "spec": {**asdict(self.spec),
                     "feature_grid": list(self.spec.feature_grid),
                     "box_size_range": list(self.spec.box_size_range)},
            "prototypes": self.prototypes.tolist(),
            "background": self.background.tolist(),
            "signatures": self.signatures.tolist(),
            "images": [
                {
                    "image_id": im.image_id,
                    "width": im.width,
                    "height": im.height,
                    "present": im.present,
                    "dominant": im.dominant,
                    "confused": im.confused,
                    "boxes": {str(c): list(b) for c, b in im.boxes.items()},
                    "target_probs": im.target_probs,
                }
                for im in self.images
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticWorld":
        raw = dict(doc["spec"])
        raw["feature_grid"] = tuple(raw["feature_grid"])
        raw["box_size_range"] = tuple(raw["box_size_range"])
        spec = WorldSpec(**raw)
        images = [
            WorldImage(
                image_id=d["image_id"], width=d["width"], height=d["height"],
                present=list(d["present"]), dominant=d["dominant"],
                confused=list(d["confused"]),
                boxes={int(c): tuple(b) for c, b in d["boxes"].items()},
                target_probs=list(d["target_probs"]),
            )
            for d in doc["images"]
        ]
        return cls(spec=spec,
                   prototypes=np.array(doc["prototypes"]),
                   background=np.array(doc["background"]),
                   signatures=np.array(doc["signatures"]),
                   images=images)


def _near_orthonormal(n: int, dim: int, seed: int) -> np.ndarray:
    """n unit rows in R^dim with small pairwise cosines."""
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(dim, n))
    q, _ = np.linalg.qr(base)
    rows = q[:, :n].T + 0.02 * rng.normal(size=(n, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    gram = np.abs(rows @ rows.T - np.eye(n))
    if gram.max() > 0.3:
        raise DataError("prototype construction exceeded the 0.3 cosine budget")
    return rows


def _runner_up_shares(b: float, residual: float, n_classes: int) -> list[float]:
    # greedy minimum-entropy split: each runner-up takes as much mass as it
    # can without overtaking the dominant class, so low-bias samples still
    # clear the entropy filter
    cap = max(b - 0.02, 0.005)
    shares: list[float] = []
    remaining = residual
    while remaining > 1e-9 and len(shares) < n_classes - 1:
        take = min(cap, remaining)
        if take < 1e-6:
            shares[-1] += remaining
            return shares
        shares.append(take)
        remaining -= take
    if remaining > 1e-9:
        shares[-1] += remaining
    return shares


def _plan_image(spec: WorldSpec, index: int) -> WorldImage:
    """Choose the image's classes and its planted probability row.

    Two failure modes of global-view labeling are planted deliberately:
    ``confused`` classes receive probability mass without being present, and
    ``hidden`` present classes (box and feature blob, no mass) model objects
    the global view misses entirely. Both are only fixable by local views.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, "image", index))
    c = spec.n_classes
    dominant = int(rng.integers(c))
    b_star = spec.bias_profile[dominant]
    b = float(np.clip(b_star + rng.uniform(-spec.label_noise, spec.label_noise),
                      0.02, 0.995))
    bg_mass = spec.background_mass
    shares = _runner_up_shares(b, 1.0 - b - bg_mass, c - 1)
    m = len(shares)
    others = [k for k in range(c) if k != dominant]
    rng.shuffle(others)
    runner_ups = [int(k) for k in others[:m]]
    spare = [int(k) for k in others[m:]]

    confused: list[int] = []
    present = [dominant]
    if spec.multilabel:
        for r in runner_ups:
            if rng.uniform() < spec.confusion_rate:
                confused.append(r)
            else:
                present.append(r)
        if spare and rng.uniform() < spec.hidden_rate:
            present.append(spare[0])  # present but invisible to the global label
    else:
        confused = runner_ups

    n_absent = c - 1 - m
    probs = np.full(c, bg_mass / n_absent if n_absent > 0 else 0.0)
    probs[dominant] = b
    for r, share in zip(runner_ups, shares):
        probs[r] = share
    probs = probs / probs.sum()

    boxes: dict[int, tuple[int, int, int, int]] = {}
    lo, hi = spec.box_size_range
    for k in sorted(present):
        bw = int(rng.integers(lo, hi + 1))
        bh = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(0, spec.image_width - bw + 1))
        y0 = int(rng.integers(0, spec.image_height - bh + 1))
        boxes[k] = (x0, y0, x0 + bw, y0 + bh)

    return WorldImage(
        image_id=f"img_{index:05d}", width=spec.image_width, height=spec.image_height,
        present=sorted(present), dominant=dominant, confused=confused,
        boxes=boxes, target_probs=[float(p) for p in probs],
    )


def realize_embedding(world: SyntheticWorld, image: WorldImage) -> np.ndarray:
    """Unit vector whose cosines against the prototypes reproduce the planted
    softmax row exactly at the world's temperature."""
    spec = world.spec
    p = np.asarray(image.target_probs)
    sims = spec.sim_peak + spec.tau * (np.log(p) - np.log(p.max()))
    if np.abs(sims).max() > 0.95:
        raise ConfigError("tau too large for the planted profile; similarities leave [-1,1]")
    protos = world.prototypes
    gram = protos @ protos.T
    alpha = np.linalg.solve(gram, sims)
    in_span = protos.T @ alpha
    norm_sq = float(alpha @ sims)
    if norm_sq >= 0.99:
        raise ConfigError("planted similarity row is not realizable as a unit vector")
    residual = world.background - protos.T @ np.linalg.solve(gram, protos @ world.background)
    residual /= np.linalg.norm(residual)
    return in_span + math.sqrt(1.0 - norm_sq) * residual


def build_feature_map(world: SyntheticWorld, image: WorldImage) -> np.ndarray:
    """(Q, h, w) map: per present class a Gaussian blob clipped to its GT box
    times that class's channel signature, plus seeded background noise."""
    spec = world.spec
    h, w = spec.feature_grid
    q = spec.feature_channels
    fm = np.zeros((q, h, w))
    xs = (np.arange(w) + 0.5) * image.width / w
    ys = (np.arange(h) + 0.5) * image.height / h
    for k, (x0, y0, x1, y1) in image.boxes.items():
        # wide sigma: the clipped Gaussian is nearly flat inside the box, so
        # every cell the box covers survives a 0.95 activation threshold
        mx, my = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        sx, sy = 5.0 * max(x1 - x0, 1), 5.0 * max(y1 - y0, 1)
        gx = np.exp(-((xs - mx) ** 2) / (2 * sx * sx))
        gy = np.exp(-((ys - my) ** 2) / (2 * sy * sy))
        blob = spec.blob_amplitude * gy[:, None] * gx[None, :]
        inside = ((xs >= x0) & (xs < x1))[None, :] & ((ys >= y0) & (ys < y1))[:, None]
        fm += (blob * inside)[None, :, :] * world.signatures[k][:, None, None]
    rng = np.random.default_rng(derive_seed(spec.seed, "fmnoise", image.image_id))
    fm += rng.normal(0.0, spec.feature_noise, size=fm.shape)
    return fm


def generate_world(spec: WorldSpec, out_dir: str | Path | None = None) -> SyntheticWorld:
    """Build a world; when out_dir is given also write manifest + tensors +
    world.json there. Byte-identical output for identical spec."""
    protos_all = _near_orthonormal(spec.n_classes + 1, spec.embedding_dim,
                                   derive_seed(spec.seed, "prototypes"))
    signatures = _near_orthonormal(spec.n_classes, spec.feature_channels,
                                   derive_seed(spec.seed, "signatures"))
    world = SyntheticWorld(spec=spec, prototypes=protos_all[:-1],
                           background=protos_all[-1], signatures=signatures)
    world.images = [_plan_image(spec, i) for i in range(spec.n_images)]
    world.embeddings = np.stack([realize_embedding(world, im) for im in world.images])

    if out_dir is not None:
        out = Path(out_dir)
        tensors = out / "tensors"
        tensors.mkdir(parents=True, exist_ok=True)
        write_tensor(tensors / "text.ccdt", world.prototypes)
        records = []
        for i, im in enumerate(world.images):
            emb_rel = f"tensors/emb_{im.image_id}.ccdt"
            fm_rel = f"tensors/fm_{im.image_id}.ccdt"
            gt_rel = f"tensors/gt_{im.image_id}.ccdt"
            write_tensor(out / emb_rel, world.embeddings[i])
            write_tensor(out / fm_rel, build_feature_map(world, im))
            gt = np.zeros(spec.n_classes, dtype=np.float32)
            gt[im.present] = 1.0
            write_tensor(out / gt_rel, gt)
            records.append({
                "image_id": im.image_id,
                "width_px": im.width,
                "height_px": im.height,
                "global_embedding_path": emb_rel,
                "feature_map_path": fm_rel,
                "gt_label_path": gt_rel,
                "gt_boxes": [{"class": k, "box": list(b)} for k, b in sorted(im.boxes.items())],
            })
        manifest = {
            "class_names": world.class_names(),
            "embedding_dim": spec.embedding_dim,
            "feature_channels": spec.feature_channels,
            "feature_grid": list(spec.feature_grid),
            "text_embedding_path": "tensors/text.ccdt",
            "image_records": records,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        (out / "world.json").write_text(json.dumps(world.to_json(), sort_keys=True) + "\n")
    return world


# --- proof-of-concept box policies -------------------------------------------

POLICIES = ("around_gt", "gt", "random", "grid")


def policy_views(policy: str, image: WorldImage, k: int = 9, seed: int = 0,
                 offset_px: int = 80) -> list[PixelBox]:
    """Boxes for one image under one of the four study policies."""
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}")
    dims = (image.width, image.height)
    gt_boxes = [(c, image.boxes[c]) for c in sorted(image.boxes)]
    rng = np.random.default_rng(derive_seed(seed, "policy", policy, image.image_id))
    full = PixelBox(0, 0, image.width, image.height, class_index=BACKGROUND, kind=policy)

    if policy in ("around_gt", "gt") and not gt_boxes:
        raise DataError(f"policy {policy!r} needs GT boxes, image {image.image_id} has none")

    if policy == "around_gt":
        out = []
        for i in range(k):
            c, (x0, y0, x1, y1) = gt_boxes[i % len(gt_boxes)]
            for _ in range(8):
                dx0, dy0, dx1, dy1 = rng.integers(-offset_px, offset_px + 1, size=4)
                nx0 = max(0, min(x0 + int(dx0), image.width))
                ny0 = max(0, min(y0 + int(dy0), image.height))
                nx1 = max(0, min(x1 + int(dx1), image.width))
                ny1 = max(0, min(y1 + int(dy1), image.height))
                if nx0 < nx1 and ny0 < ny1:
                    out.append(PixelBox(nx0, ny0, nx1, ny1, class_index=c, kind=policy))
                    break
        return out

    if policy == "gt":
        out = [PixelBox(*b, class_index=c, kind=policy) for c, b in gt_boxes]
        while len(out) < k:
            out.append(full)
        return out

    if policy == "random":
        out = []
        while len(out) < k:
            x0 = int(rng.integers(0, image.width))
            y0 = int(rng.integers(0, image.height))
            x1 = int(rng.integers(x0 + 1, image.width + 1))
            y1 = int(rng.integers(y0 + 1, image.height + 1))
            out.append(PixelBox(x0, y0, x1, y1, class_index=BACKGROUND, kind=policy))
        return out

    # grid: 3x3 tiling partitioning the image exactly
    xs = [image.width * i // 3 for i in range(4)]
    ys = [image.height * i // 3 for i in range(4)]
    return [
        PixelBox(xs[i], ys[j], xs[i + 1], ys[j + 1], class_index=BACKGROUND, kind=policy)
        for j in range(3) for i in range(3)
    ]
