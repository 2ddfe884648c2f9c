"""Patch-probability aggregation and initial/local label fusion.

The local label is the class-wise maximum over an image's patch rows; the
final label is a convex combination of initial and local. Images with no
patches keep their initial label untouched rather than fusing with zeros,
which would suppress every class on images the classifier was unsure about.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError


def aggregate_patches(patch_probs: np.ndarray) -> np.ndarray | None:
    """Class-wise max over patches; None when there are no patches."""
    pp = np.asarray(patch_probs, dtype=np.float64)
    if pp.ndim != 2:
        raise DataError(f"patch probs must be (N, C), got shape {pp.shape}")
    if pp.shape[0] == 0:
        return None
    if pp.min() < 0 or pp.max() > 1:
        raise DataError("patch probs outside [0, 1]")
    return pp.max(axis=0)


def fuse_labels(initial: np.ndarray, local: np.ndarray | None, alpha: float) -> np.ndarray:
    """alpha * initial + (1 - alpha) * local; initial unchanged if local absent."""
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    init = np.asarray(initial, dtype=np.float64)
    if local is None:
        return init.copy()
    loc = np.asarray(local, dtype=np.float64)
    if init.shape != loc.shape:
        raise DataError(f"shape mismatch: initial {init.shape} vs local {loc.shape}")
    return alpha * init + (1.0 - alpha) * loc
