import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccd.debias import (
    BiasVector,
    CalibrationConfig,
    calibrate,
    estimate_bias,
    normalized_entropy,
)
from ccd.errors import ConfigError, DataError, NoAdmittedSamplesError
from ccd.pseudo_label import PseudoLabelSet


def make_initial(rows):
    return PseudoLabelSet(kind="initial", probs=np.asarray(rows, dtype=np.float64))


class TestNormalizedEntropy:
    def test_one_hot_is_zero(self):
        assert normalized_entropy(np.array([1.0, 0.0, 0.0])) == pytest.approx(0.0)

    def test_uniform_is_one(self):
        for c in (2, 4, 9):
            assert normalized_entropy(np.full(c, 1.0 / c)) == pytest.approx(1.0)

    def test_half_half_over_four(self):
        # H = ln 2, normalized by ln 4 -> exactly 0.5
        assert normalized_entropy(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(0.5)

    def test_requires_two_classes(self):
        with pytest.raises(DataError):
            normalized_entropy(np.array([1.0]))

    def test_requires_distribution(self):
        with pytest.raises(DataError):
            normalized_entropy(np.array([0.7, 0.7]))


class TestEstimateBias:
    def test_single_class_bias(self):
        labels = make_initial([[0.8, 0.15, 0.04, 0.01]] * 3)
        bias = estimate_bias(labels, CalibrationConfig(entropy_threshold=0.6))
        assert bias.bias[0] == pytest.approx(0.8)
        assert np.all(bias.bias[1:] == 1.0)
        assert bias.counts[0] == 3
        assert bias.n_filtered == 3

    def test_average_of_two_samples(self):
        # per the 4-step recipe: accumulate top-1 probs, divide by count
        labels = make_initial([
            [0.8, 0.1, 0.06, 0.04],
            [0.6, 0.3, 0.06, 0.04],
        ])
        bias = estimate_bias(labels, CalibrationConfig(entropy_threshold=0.99))
        assert bias.bias[0] == pytest.approx(0.7)
        assert bias.counts[0] == 2

    def test_high_entropy_sample_excluded(self):
        # second row is near uniform: normalized entropy ~0.99 > 0.5
        labels = make_initial([
            [0.9, 0.05, 0.03, 0.02],
            [0.3, 0.25, 0.25, 0.2],
        ])
        bias = estimate_bias(labels, CalibrationConfig(entropy_threshold=0.5))
        assert bias.n_filtered == 1
        assert bias.counts[0] == 1
        assert bias.bias[0] == pytest.approx(0.9)

    def test_empty_admission_is_distinct_error(self):
        labels = make_initial([[0.3, 0.25, 0.25, 0.2]])
        with pytest.raises(NoAdmittedSamplesError):
            estimate_bias(labels, CalibrationConfig(entropy_threshold=0.01))

    def test_argmax_tie_breaks_to_lowest_index(self):
        labels = make_initial([[0.45, 0.45, 0.06, 0.04]])
        bias = estimate_bias(labels, CalibrationConfig(entropy_threshold=0.9))
        assert bias.counts[0] == 1 and bias.counts[1] == 0

    def test_raw_entropy_mode(self):
        # H([0.5, 0.5, ~0, ~0]) = ~ln 2 = 0.693: admitted under raw threshold
        # 0.8 but rejected under normalized threshold 0.4 (0.693/ln4 = 0.5)
        labels = make_initial([[0.5, 0.5, 0.0, 0.0]])
        raw_cfg = CalibrationConfig(entropy_threshold=0.8, normalized_entropy=False)
        assert estimate_bias(labels, raw_cfg).n_filtered == 1
        with pytest.raises(NoAdmittedSamplesError):
            estimate_bias(labels, CalibrationConfig(entropy_threshold=0.4))

    def test_requires_initial_kind(self):
        labels = PseudoLabelSet(kind="final", probs=np.array([[0.9, 0.1]]))
        with pytest.raises(DataError):
            estimate_bias(labels, CalibrationConfig())


class TestCalibrate:
    def test_neutral_bias_is_floor_clamp_only(self):
        cfg = CalibrationConfig(floor=0.01)
        bias = BiasVector.neutral(3)
        p = np.array([0.5, 0.2, 0.001])
        out = calibrate(p, bias, cfg)
        np.testing.assert_allclose(out, [0.5, 0.2, 0.01])

    def test_hand_value(self):
        cfg = CalibrationConfig(floor=0.01)
        bias = BiasVector(bias=np.array([0.5, 1.0]), counts=np.array([3, 0]), n_filtered=3)
        out = calibrate(np.array([0.3, 0.3]), bias, cfg)
        assert out[0] == pytest.approx(0.6)
        assert out[1] == pytest.approx(0.3)

    def test_upper_clamp(self):
        cfg = CalibrationConfig()
        bias = BiasVector(bias=np.array([0.5, 1.0]), counts=np.array([3, 0]), n_filtered=3)
        out = calibrate(np.array([0.9, 0.2]), bias, cfg)
        assert out[0] == 1.0

    def test_disabled_is_identity(self):
        cfg = CalibrationConfig(enabled=False)
        bias = BiasVector(bias=np.array([0.5, 0.7]), counts=np.array([1, 1]), n_filtered=2)
        p = np.array([0.003, 0.9])
        np.testing.assert_array_equal(calibrate(p, bias, cfg), p)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_monotone_within_class(self, seed):
        rng = np.random.default_rng(seed)
        cfg = CalibrationConfig()
        c = 5
        bias = BiasVector(bias=rng.uniform(0.2, 1.0, c), counts=np.ones(c, dtype=int),
                          n_filtered=1)
        p = np.sort(rng.uniform(0, 1, size=(20, c)), axis=0)
        out = calibrate(p, bias, cfg)
        assert np.all(np.diff(out, axis=0) >= 0)

    def test_neutrality_preserves_argmax(self):
        rng = np.random.default_rng(9)
        cfg = CalibrationConfig(floor=0.01)
        bias = BiasVector.neutral(6)
        raw = rng.random((100, 6)) + 1e-3
        raw /= raw.sum(axis=1, keepdims=True)
        out = calibrate(raw, bias, cfg)
        mask = raw.max(axis=1) >= cfg.floor
        assert mask.all()
        np.testing.assert_array_equal(out[mask].argmax(axis=1), raw[mask].argmax(axis=1))


class TestConfigValidation:
    def test_floor_range(self):
        with pytest.raises(ConfigError):
            CalibrationConfig(floor=0.6)

    def test_threshold_range(self):
        with pytest.raises(ConfigError):
            CalibrationConfig(entropy_threshold=0.0)
        with pytest.raises(ConfigError):
            CalibrationConfig(entropy_threshold=1.5)  # normalized mode

    def test_raw_threshold_above_one_allowed(self):
        CalibrationConfig(entropy_threshold=2.0, normalized_entropy=False)


def test_planted_bias_recovery_small():
    # quick version of the acceptance statistical check
    from ccd.synth import WorldSpec, generate_world
    from ccd.pseudo_label import initial_labels

    spec = WorldSpec(seed=3, n_classes=6, n_images=600, embedding_dim=16,
                     feature_channels=8, bias_profile=[0.5, 0.6, 0.7, 0.8, 0.9, 0.95])
    world = generate_world(spec)
    labels = initial_labels(world.embeddings, world.prototypes, tau=spec.tau)
    bias = estimate_bias(labels, CalibrationConfig(entropy_threshold=0.5))
    assert bias.n_filtered == spec.n_images  # every sample is admissible by design
    for c in range(6):
        if bias.counts[c] >= 30:
            assert abs(bias.bias[c] - spec.bias_profile[c]) / spec.bias_profile[c] < 0.05
