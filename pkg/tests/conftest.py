import numpy as np
import pytest

from ccd.synth import SyntheticWorld, WorldSpec, generate_world


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory) -> tuple[SyntheticWorld, object]:
    """Small multilabel world with a biased/unbiased class split, on disk."""
    spec = WorldSpec(
        seed=11, n_classes=6, n_images=40, embedding_dim=24, feature_channels=12,
        feature_grid=(8, 8), bias_profile=[0.45, 0.5, 0.9, 0.9, 0.9, 0.9],
    )
    out = tmp_path_factory.mktemp("tiny_world")
    world = generate_world(spec, out)
    return world, out


def rng_rows(rng: np.random.Generator, n: int, c: int) -> np.ndarray:
    """Random probability rows (each summing to 1)."""
    raw = rng.random((n, c)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)
