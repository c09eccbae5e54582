import numpy as np
import pytest
import torch

from painsynth.core import ConditionBundle, Rng
from painsynth.errors import ConfigError
from painsynth.guidance import GuidanceWeights, condition_dropout, guided_denoise, make_guided_denoise_fn
from painsynth.net import BatchedConditions


def bundle():
    return ConditionBundle(np.linspace(0, 4, 8), 1.0, 0.5)


class TestConditionDropout:
    def test_p_zero_unchanged(self):
        b = bundle()
        out = condition_dropout(b, 0.0, Rng(0, 0))
        assert out.null_mask == (False, False, False)
        np.testing.assert_array_equal(out.stimuli, b.stimuli)

    def test_p_one_all_null(self):
        out = condition_dropout(bundle(), 1.0, Rng(0, 0))
        assert out.null_mask == (True, True, True)

    def test_monte_carlo_rate(self):
        rng = Rng(42, 0)
        n = 100_000
        counts = np.zeros(3)
        for _ in range(n):
            counts += condition_dropout(bundle(), 0.1, rng).null_mask
        rates = counts / n
        assert np.all(np.abs(rates - 0.1) < 0.01), rates

    def test_existing_null_preserved(self):
        b = bundle().with_null(2)
        out = condition_dropout(b, 0.0, Rng(0, 0))
        assert out.null_mask == (False, False, True)

    def test_invalid_probability(self):
        with pytest.raises(ConfigError):
            condition_dropout(bundle(), 1.5, Rng(0, 0))


class CountingDenoiser:
    """Stub that records which null patterns it was asked to denoise."""

    def __init__(self, outputs=None):
        self.calls = []
        self.outputs = outputs or {}

    def __call__(self, z, sigma, cond, t0=0):
        pattern = tuple(bool(v) for v in cond.null_mask[0].tolist())
        self.calls.append(pattern)
        if pattern in self.outputs:
            return self.outputs[pattern]
        return torch.zeros_like(z)


class TestGuidedDenoise:
    def setup_method(self):
        self.z = torch.tensor(Rng(1, 0).normal((1, 2, 4, 2)))
        self.cond = BatchedConditions.from_bundles(bundle(), dtype=torch.float64)

    def test_zero_weights_bitwise_plain(self):
        den = lambda z, s, c, t0=0: torch.tanh(z) * 0.7
        plain = den(self.z, 1.0, self.cond)
        guided = guided_denoise(den, self.z, 1.0, self.cond, GuidanceWeights(0.0, 0.0, 0.0))
        assert torch.equal(guided, plain)

    def test_condition_independent_denoiser_cancels(self):
        den = lambda z, s, c, t0=0: torch.sin(z)
        expected = den(self.z, 1.0, self.cond)
        for w in (GuidanceWeights(1, 2, 4), GuidanceWeights(0.3, 0.0, 7.0)):
            out = guided_denoise(den, self.z, 1.0, self.cond, w)
            torch.testing.assert_close(out, expected, rtol=1e-12, atol=1e-12)

    def test_plug_in_combination(self):
        shape = (1, 2, 4, 2)
        v_full = torch.full(shape, 1.0, dtype=torch.float64)
        v_stim = torch.full(shape, 2.0, dtype=torch.float64)
        v_expr = torch.full(shape, 3.0, dtype=torch.float64)
        v_emo = torch.full(shape, 5.0, dtype=torch.float64)
        den = CountingDenoiser({
            (False, False, False): v_full,
            (True, False, False): v_stim,
            (False, True, False): v_expr,
            (False, False, True): v_emo,
        })
        out = guided_denoise(den, self.z, 1.0, self.cond, GuidanceWeights(1.0, 2.0, 4.0))
        expected = 8.0 * v_full - 1.0 * v_stim - 2.0 * v_expr - 4.0 * v_emo
        torch.testing.assert_close(out, expected, rtol=0, atol=0)

    def test_cost_contract(self):
        for weights, expected_calls in [
            (GuidanceWeights(0, 0, 0), 1),
            (GuidanceWeights(1, 0, 0), 2),
            (GuidanceWeights(1, 0.5, 0), 3),
            (GuidanceWeights(1, 0.5, 0.25), 4),
        ]:
            den = CountingDenoiser()
            guided_denoise(den, self.z, 1.0, self.cond, weights)
            assert len(den.calls) == expected_calls

    def test_each_extra_pass_nulls_exactly_one_channel(self):
        den = CountingDenoiser()
        guided_denoise(den, self.z, 1.0, self.cond, GuidanceWeights(1, 1, 1))
        assert den.calls[0] == (False, False, False)
        assert set(den.calls[1:]) == {
            (True, False, False),
            (False, True, False),
            (False, False, True),
        }

    def test_make_guided_fn_without_weights_is_plain(self):
        den = CountingDenoiser()
        fn = make_guided_denoise_fn(den, self.cond, None)
        fn(self.z, 1.0)
        assert den.calls == [(False, False, False)]

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            GuidanceWeights(-1.0, 0.0, 0.0)
