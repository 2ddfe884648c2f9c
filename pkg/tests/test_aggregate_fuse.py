import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccd.aggregate_fuse import aggregate_patches, fuse_labels
from ccd.errors import ConfigError, DataError


class TestAggregate:
    def test_single_patch_is_identity(self):
        row = np.array([0.2, 0.9, 0.5])
        np.testing.assert_array_equal(aggregate_patches(row[None, :]), row)

    def test_elementwise_max(self):
        pp = np.array([[0.2, 0.9], [0.7, 0.1]])
        np.testing.assert_allclose(aggregate_patches(pp), [0.7, 0.9])

    def test_zero_patch_changes_nothing(self):
        pp = np.array([[0.2, 0.9], [0.7, 0.1]])
        with_zero = np.vstack([pp, np.zeros(2)])
        np.testing.assert_array_equal(aggregate_patches(with_zero), aggregate_patches(pp))

    def test_empty_returns_absent_marker(self):
        assert aggregate_patches(np.zeros((0, 4))) is None

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            aggregate_patches(np.array([[1.2, 0.0]]))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (5, 4), elements=st.floats(0, 1)), st.permutations(range(5)))
    def test_permutation_invariant(self, pp, perm):
        np.testing.assert_array_equal(aggregate_patches(pp), aggregate_patches(pp[perm]))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(0, 1)),
           arrays(np.float64, (1, 3), elements=st.floats(0, 1)))
    def test_monotone_under_patch_addition(self, pp, extra):
        base = aggregate_patches(pp)
        grown = aggregate_patches(np.vstack([pp, extra]))
        assert np.all(grown >= base)


class TestFuse:
    def test_alpha_one_keeps_initial(self):
        init = np.array([0.3, 0.8])
        local = np.array([0.9, 0.1])
        np.testing.assert_array_equal(fuse_labels(init, local, 1.0), init)

    def test_alpha_zero_keeps_local(self):
        init = np.array([0.3, 0.8])
        local = np.array([0.9, 0.1])
        np.testing.assert_array_equal(fuse_labels(init, local, 0.0), local)

    def test_hand_value_point_four(self):
        # 0.4 * 0.5 + 0.6 * 1.0 = 0.8
        out = fuse_labels(np.array([0.5]), np.array([1.0]), 0.4)
        assert out[0] == pytest.approx(0.8)

    def test_absent_local_keeps_initial(self):
        init = np.array([0.3, 0.8])
        np.testing.assert_array_equal(fuse_labels(init, None, 0.4), init)

    def test_alpha_out_of_range(self):
        with pytest.raises(ConfigError):
            fuse_labels(np.array([0.5]), np.array([0.5]), 1.3)

    @settings(max_examples=80, deadline=None)
    @given(arrays(np.float64, 4, elements=st.floats(0, 1)),
           arrays(np.float64, 4, elements=st.floats(0, 1)),
           st.floats(0, 1))
    def test_bounded_by_endpoints(self, init, local, alpha):
        out = fuse_labels(init, local, alpha)
        lo = np.minimum(init, local)
        hi = np.maximum(init, local)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, 4, elements=st.floats(0, 1)), st.floats(0, 1))
    def test_idempotent_on_equal_inputs(self, vec, alpha):
        np.testing.assert_allclose(fuse_labels(vec, vec, alpha), vec, atol=1e-12)
