"""Initial pseudo-labels from global image embeddings and class text embeddings.

Per-class scores are cosine similarities between the image embedding and each
class text embedding; a temperature softmax over the class axis turns them
into one probability row per image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

KINDS = ("initial", "local", "final")


@dataclass
class PseudoLabelSet:
    """Per-image per-class probabilities of one of three kinds.

    ``initial`` rows are softmax outputs and sum to 1; ``local`` and ``final``
    rows carry no row-sum constraint (max-aggregation and calibration break it).
    """

    kind: str
    probs: np.ndarray  # (n_images, n_classes) float64
    image_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DataError(f"unknown label kind {self.kind!r}")
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise DataError(f"probs must be 2-D, got shape {self.probs.shape}")
        if not np.all(np.isfinite(self.probs)):
            raise NumericError(f"non-finite entries in {self.kind} labels")
        if self.probs.size and (self.probs.min() < 0.0 or self.probs.max() > 1.0):
            raise DataError(f"{self.kind} labels outside [0, 1]")
        if self.kind == "initial" and self.probs.size:
            sums = self.probs.sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-6:
                worst = int(np.abs(sums - 1.0).argmax())
                raise DataError(
                    f"initial label row {worst} sums to {sums[worst]}, expected 1"
                )
        if self.image_ids and len(self.image_ids) != self.probs.shape[0]:
            raise DataError("image_ids length does not match probs rows")

    @property
    def n_images(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


def _check_embedding_rows(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DataError(f"{name} must be 2-D (rows, dim), got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"non-finite entries in {name}")
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms <= 1e-12):
        bad = int(np.argmin(norms))
        raise DataError(f"{name} row {bad} has (near) zero norm")
    return m


def cosine_similarity(f: np.ndarray, w: np.ndarray) -> float:
    """f.w / (|f| |w|), in [-1, 1]."""
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if f.shape != w.shape or f.ndim != 1:
        raise DataError(f"dim mismatch: {f.shape} vs {w.shape}")
    nf = np.linalg.norm(f)
    nw = np.linalg.norm(w)
    if nf <= 1e-12 or nw <= 1e-12:
        raise DataError("cosine similarity undefined for (near) zero-norm input")
    return float(np.dot(f, w) / (nf * nw))


def softmax_probs(scores: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over the last axis, with max-subtraction for stability."""
    if tau <= 0:
        raise DataError(f"tau must be positive, got {tau}")
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite scores")
    z = scores / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def initial_labels(images: np.ndarray, texts: np.ndarray, tau: float,
                   image_ids: list[str] | None = None) -> PseudoLabelSet:
    """One softmax row per image over cosine similarities to every class."""
    images = _check_embedding_rows(images, "image embeddings")
    texts = _check_embedding_rows(texts, "text embeddings")
    if images.shape[1] != texts.shape[1]:
        raise DataError(
            f"embedding dim mismatch: images {images.shape[1]} vs texts {texts.shape[1]}"
        )
    img_n = images / np.linalg.norm(images, axis=1, keepdims=True)
    txt_n = texts / np.linalg.norm(texts, axis=1, keepdims=True)
    sims = img_n @ txt_n.T
    probs = softmax_probs(sims, tau)
    return PseudoLabelSet(kind="initial", probs=probs,
                          image_ids=list(image_ids) if image_ids else [])
