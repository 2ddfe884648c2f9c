"""Per-class prediction-bias estimation and inverse-bias calibration.

Bias for a class is the mean top-1 probability it receives over low-entropy
samples of the initial label set. Calibration divides probabilities by the
bias and clamps to [floor, 1]. Applied identically to global and local rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NoAdmittedSamplesError
from .pseudo_label import PseudoLabelSet


@dataclass
class CalibrationConfig:
    entropy_threshold: float = 0.5
    floor: float = 0.01
    # threshold compares against entropy normalized by ln(C) so the same
    # constant works across datasets with different C; set False to compare
    # against raw natural-log entropy instead
    normalized_entropy: bool = True
    enabled: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.entropy_threshold):
            raise ConfigError(f"entropy_threshold must be > 0, got {self.entropy_threshold}")
        if self.normalized_entropy and self.entropy_threshold > 1.0:
            raise ConfigError(
                f"normalized entropy threshold must be in (0, 1], got {self.entropy_threshold}"
            )
        if not (0.0 < self.floor < 0.5):
            raise ConfigError(f"floor must be in (0, 0.5), got {self.floor}")


@dataclass
class BiasVector:
    """Per-class mean top-1 probability plus occurrence counts.

    Classes never observed as top-1 carry the neutral bias 1.0, so calibration
    is total.
    """

    bias: np.ndarray       # (C,) in (0, 1]
    counts: np.ndarray     # (C,) non-negative ints
    n_filtered: int        # samples admitted by the entropy filter

    def __post_init__(self) -> None:
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.bias.shape != self.counts.shape or self.bias.ndim != 1:
            raise DataError("bias and counts must be 1-D with equal length")
        observed = self.counts > 0
        if np.any((self.bias[observed] <= 0) | (self.bias[observed] > 1)):
            raise DataError("observed bias entries must be in (0, 1]")
        if np.any(self.bias[~observed] != 1.0):
            raise DataError("unobserved classes must carry neutral bias 1.0")

    @classmethod
    def neutral(cls, n_classes: int) -> "BiasVector":
        return cls(bias=np.ones(n_classes), counts=np.zeros(n_classes, dtype=np.int64),
                   n_filtered=0)

    def to_report(self, class_names: list[str]) -> dict:
        return {
            "n_filtered": int(self.n_filtered),
            "classes": {
                name: {"bias": float(b), "count": int(c)}
                for name, b, c in zip(class_names, self.bias, self.counts)
            },
        }

    @classmethod
    def from_report(cls, doc: dict, class_names: list[str]) -> "BiasVector":
        try:
            bias = np.array([doc["classes"][n]["bias"] for n in class_names])
            counts = np.array([doc["classes"][n]["count"] for n in class_names])
            return cls(bias=bias, counts=counts, n_filtered=int(doc["n_filtered"]))
        except KeyError as exc:
            raise DataError(f"bias report missing entry: {exc}")


def normalized_entropy(probs: np.ndarray) -> float:
    """H(p) / ln(C) with 0 ln 0 := 0; requires C >= 2."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise DataError(f"need a distribution over >= 2 classes, got shape {p.shape}")
    if abs(p.sum() - 1.0) > 1e-6 or p.min() < 0:
        raise DataError("input is not a probability distribution")
    return float(_entropy_rows(p[None, :])[0] / np.log(p.shape[0]))


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)


def estimate_bias(labels: PseudoLabelSet, cfg: CalibrationConfig) -> BiasVector:
    """Mean top-1 probability per class over entropy-admitted samples.

    Argmax ties break to the lowest class index; classes never seen as top-1
    get neutral bias 1.0.
    """
    if labels.kind != "initial":
        raise DataError(f"bias is estimated from initial labels, got kind={labels.kind!r}")
    probs = labels.probs
    n, c = probs.shape
    if c < 2:
        raise DataError("need >= 2 classes to estimate bias")
    entropy = _entropy_rows(probs)
    if cfg.normalized_entropy:
        entropy = entropy / np.log(c)
    admitted = entropy < cfg.entropy_threshold
    n_filtered = int(admitted.sum())
    if n_filtered == 0:
        raise NoAdmittedSamplesError(
            f"entropy filter at {cfg.entropy_threshold} admitted 0 of {n} samples"
        )
    top = probs[admitted].argmax(axis=1)  # ties -> lowest index
    top_p = probs[admitted, top]
    acc = np.zeros(c)
    counts = np.zeros(c, dtype=np.int64)
    np.add.at(acc, top, top_p)
    np.add.at(counts, top, 1)
    bias = np.ones(c)
    seen = counts > 0
    bias[seen] = acc[seen] / counts[seen]
    return BiasVector(bias=bias, counts=counts, n_filtered=n_filtered)


def calibrate(probs: np.ndarray, bias: BiasVector, cfg: CalibrationConfig) -> np.ndarray:
    """clamp(p / bias, floor, 1) per class; identity when calibration is disabled."""
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] != bias.bias.shape[0]:
        raise DataError(f"class count mismatch: probs {p.shape[-1]} vs bias {bias.bias.shape[0]}")
    if not cfg.enabled:
        return p.copy()
    return np.clip(p / bias.bias, cfg.floor, 1.0)
