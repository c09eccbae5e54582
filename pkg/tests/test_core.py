import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from painsynth.core import (
    ConditionBundle,
    LatentSequence,
    Rng,
    sinusoidal_embed,
    stack_frames,
    unstack_frames,
)
from painsynth.errors import ConfigError, DataError


class TestStacking:
    def test_index_bookkeeping(self):
        x = LatentSequence(np.arange(32, dtype=np.float64).reshape(8, 4))
        z = stack_frames(x, 4)
        assert z.data.shape == (2, 4, 4)
        np.testing.assert_array_equal(z.data[0, 1], x.data[1])
        np.testing.assert_array_equal(z.data[1, 3], x.data[7])

    def test_stack_one_is_identity_reshape(self):
        x = LatentSequence(np.random.default_rng(0).normal(size=(5, 3)))
        z = stack_frames(x, 1)
        assert z.data.shape == (5, 1, 3)
        np.testing.assert_array_equal(z.data[:, 0, :], x.data)

    def test_training_shape(self):
        x = LatentSequence(np.zeros((64, 8)))
        assert stack_frames(x, 4).steps == 16

    def test_non_divisible_rejected_with_remainder(self):
        x = LatentSequence(np.zeros((10, 2)))
        with pytest.raises(ConfigError, match="remainder 2"):
            stack_frames(x, 4)

    def test_roundtrip_exact(self):
        rng = np.random.default_rng(1)
        x = LatentSequence(rng.normal(size=(12, 5)))
        back = unstack_frames(stack_frames(x, 4))
        np.testing.assert_array_equal(back.data, x.data)
        assert back.frame_rate == x.frame_rate

    def test_single_step_stack(self):
        x = LatentSequence(np.random.default_rng(2).normal(size=(6, 2)))
        z = stack_frames(x, 6)
        assert z.steps == 1
        np.testing.assert_array_equal(unstack_frames(z).data, x.data)

    @given(steps=st.integers(1, 8), s=st.integers(1, 5), d=st.integers(1, 6), seed=st.integers(0, 2**31))
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_property(self, steps, s, d, seed):
        data = np.random.default_rng(seed).normal(size=(steps * s, d))
        x = LatentSequence(data)
        np.testing.assert_array_equal(unstack_frames(stack_frames(x, s)).data, data)


class TestSinusoidalEmbed:
    def test_zero(self):
        e = sinusoidal_embed(0.0, 8)
        np.testing.assert_array_equal(e[:4], 0.0)
        np.testing.assert_array_equal(e[4:], 1.0)

    def test_bounded(self):
        for t in (-13.7, 0.3, 2.0, 1e4, 123456.0):
            assert np.abs(sinusoidal_embed(t, 16)).max() <= 1.0

    def test_closed_form(self):
        # omega_0 = 1, omega_1 = 10000^(-1/2) = 0.01
        e = sinusoidal_embed(1.0, 4)
        expected = [math.sin(1.0), math.sin(0.01), math.cos(1.0), math.cos(0.01)]
        np.testing.assert_allclose(e, expected, rtol=0, atol=1e-15)

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            sinusoidal_embed(1.0, 5)

    def test_vectorized(self):
        e = sinusoidal_embed(np.array([0.0, 1.0]), 4)
        assert e.shape == (2, 4)
        np.testing.assert_allclose(e[1], sinusoidal_embed(1.0, 4))

    def test_deterministic(self):
        np.testing.assert_array_equal(sinusoidal_embed(3.7, 32), sinusoidal_embed(3.7, 32))


class TestRng:
    def test_reproducible_long_stream(self):
        a = Rng(42, 3).uniform((1_000_000,))
        b = Rng(42, 3).uniform((1_000_000,))
        np.testing.assert_array_equal(a, b)

    def test_streams_independent(self):
        a = Rng(42, 0).normal((100,))
        b = Rng(42, 1).normal((100,))
        assert not np.array_equal(a, b)

    def test_seed_changes_stream(self):
        assert not np.array_equal(Rng(1, 0).normal((50,)), Rng(2, 0).normal((50,)))

    def test_state_roundtrip(self):
        rng = Rng(7, 1)
        rng.normal((10,))
        state = rng.get_state()
        expected = rng.normal((5,))
        rng2 = Rng(7, 1)
        rng2.set_state(state)
        np.testing.assert_array_equal(rng2.normal((5,)), expected)

    def test_child_matches_direct_construction(self):
        np.testing.assert_array_equal(Rng(9, 0).child(4).normal((8,)), Rng(9, 4).normal((8,)))


class TestValueTypes:
    def test_latent_sequence_rejects_nonfinite(self):
        with pytest.raises(DataError):
            LatentSequence(np.array([[1.0, np.nan]]))

    def test_latent_sequence_immutable(self):
        x = LatentSequence(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            x.data[0, 0] = 1.0

    def test_latent_sequence_needs_2d(self):
        with pytest.raises(DataError):
            LatentSequence(np.zeros(4))

    def test_bundle_rejects_negative_stimuli(self):
        with pytest.raises(DataError):
            ConditionBundle(np.array([-0.1, 1.0]), 1.0, 0.0)

    def test_bundle_allows_null_sentinel(self):
        b = ConditionBundle(np.array([np.nan, 1.0]), 1.0, 0.0)
        assert np.isnan(b.stimuli[0])

    def test_bundle_window_and_null(self):
        b = ConditionBundle(np.arange(6, dtype=float), 1.0, 0.0)
        w = b.window(2, 3)
        np.testing.assert_array_equal(w.stimuli, [2.0, 3.0, 4.0])
        assert w.with_null(1).null_mask == (False, True, False)
