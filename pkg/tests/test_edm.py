import math

import numpy as np
import pytest
import torch

from painsynth.core import ConditionBundle, Rng
from painsynth.edm import (
    Denoiser,
    EdmParams,
    SamplerHistory,
    karras_grid,
    precondition_coeffs,
    sample_full_sequence,
    sampler_step,
    training_loss,
)
from painsynth.errors import ConfigError
from painsynth.net import BatchedConditions, NetConfig, TemporalUnet

PARAMS = EdmParams()


class TestPreconditionCoeffs:
    def test_sigma_zero_limits(self):
        c_skip, c_out, c_in, c_noise = precondition_coeffs(0.0, PARAMS)
        assert c_skip == 1.0
        assert c_out == 0.0
        assert c_in == 2.0  # 1/sigma_data with sigma_data = 0.5
        assert c_noise == math.log(PARAMS.sigma_min) / 4.0

    def test_sigma_equals_sigma_data(self):
        c_skip, c_out, c_in, _ = precondition_coeffs(0.5, PARAMS)
        np.testing.assert_allclose(c_skip, 0.5, rtol=1e-15)
        np.testing.assert_allclose(c_out, 0.5 / math.sqrt(2), rtol=1e-15)
        np.testing.assert_allclose(c_in, math.sqrt(2), rtol=1e-15)

    def test_algebraic_identities(self):
        sigma = np.exp(np.random.default_rng(0).uniform(-5, 4, size=200))
        c_skip, c_out, c_in, _ = precondition_coeffs(sigma, PARAMS)
        np.testing.assert_allclose(c_out * c_in, sigma * PARAMS.sigma_data * c_in**2, rtol=1e-12)
        assert precondition_coeffs(0.0, PARAMS)[0] == 1.0

    def test_negative_sigma_rejected(self):
        with pytest.raises(ConfigError):
            precondition_coeffs(-0.1, PARAMS)

    def test_array_input(self):
        c_skip, _, _, _ = precondition_coeffs(np.array([0.0, 0.5]), PARAMS)
        assert c_skip.shape == (2,)


def zero_net(z, labels, cond, t0=0):
    return torch.zeros_like(z)


def ones_net(z, labels, cond, t0=0):
    return torch.ones_like(z)


def _cond(steps, stack):
    bundle = ConditionBundle(np.ones(steps * stack), 1.0, 0.0)
    return bundle, BatchedConditions.from_bundles(bundle, dtype=torch.float64)


class TestDenoiser:
    def test_zero_net_gives_skip_scaling(self):
        den = Denoiser(zero_net, PARAMS)
        z = torch.randn(1, 3, 2, 4, dtype=torch.float64)
        _, cond = _cond(3, 2)
        out = den(z, 1.7, cond)
        c_skip = precondition_coeffs(1.7, PARAMS)[0]
        torch.testing.assert_close(out, c_skip * z, rtol=1e-15, atol=0)

    def test_sigma_zero_is_identity(self):
        den = Denoiser(ones_net, PARAMS)
        z = torch.randn(2, 3, 2, 4, dtype=torch.float64)
        _, cond = _cond(3, 2)
        assert torch.equal(den(z, 0.0, cond), z)

    def test_ones_net_plug_in(self):
        den = Denoiser(ones_net, PARAMS)
        z = torch.randn(1, 2, 2, 4, dtype=torch.float64)
        _, cond = _cond(2, 2)
        out = den(z, 0.5, cond)
        expected = 0.5 * z + (0.5 / math.sqrt(2)) * torch.ones_like(z)
        torch.testing.assert_close(out, expected, rtol=1e-14, atol=1e-15)

    def test_per_step_sigma_vector(self):
        den = Denoiser(zero_net, PARAMS)
        z = torch.ones(1, 3, 2, 4, dtype=torch.float64)
        _, cond = _cond(3, 2)
        sig = np.array([0.0, 0.5, 2.0])
        out = den(z, sig, cond)
        c_skip = precondition_coeffs(sig, PARAMS)[0]
        for t in range(3):
            torch.testing.assert_close(out[0, t], torch.full((2, 4), c_skip[t], dtype=torch.float64))


class TestTrainingLoss:
    def test_perfect_predictor_zero_loss(self):
        y = torch.tensor(Rng(3, 0).normal((2, 4, 2, 3)))
        bundle = ConditionBundle(np.ones(8), 1.0, 0.0)
        cond = BatchedConditions.from_bundles([bundle, bundle], dtype=torch.float64)

        def oracle_net(z_scaled, labels, cond, t0=0):
            sigma = torch.exp(4.0 * labels)[:, :, None, None]
            sd2 = PARAMS.sigma_data**2
            c_in = 1.0 / torch.sqrt(sigma**2 + sd2)
            c_skip = sd2 / (sigma**2 + sd2)
            c_out = sigma * PARAMS.sigma_data / torch.sqrt(sigma**2 + sd2)
            noisy = z_scaled / c_in
            return (y - c_skip * noisy) / c_out

        loss = training_loss(oracle_net, PARAMS, y, cond, Rng(4, 0))
        assert float(loss) < 1e-18

    def test_zero_net_matches_direct_target_mean(self):
        y = torch.tensor(Rng(5, 0).normal((2, 4, 2, 3)))
        bundle = ConditionBundle(np.ones(8), 1.0, 0.0)
        cond = BatchedConditions.from_bundles([bundle, bundle], dtype=torch.float64)
        loss, details = training_loss(zero_net, PARAMS, y, cond, Rng(6, 0), return_details=True)
        np.testing.assert_allclose(float(loss), float((details["y_target"] ** 2).mean()), rtol=1e-12)

    def test_latent_loss_equals_weighted_data_loss(self):
        # lambda(sigma) ||D - y||^2 with lambda = (sigma^2 + sd^2)/(sigma sd)^2
        rng = Rng(7, 0)
        for trial in range(100):
            y = torch.tensor(rng.normal((1, 3, 2, 2)))
            w = torch.tensor(rng.normal((2 * 2, 2 * 2)))

            def net(z_scaled, labels, cond, t0=0):
                flat = z_scaled.reshape(z_scaled.shape[0], z_scaled.shape[1], -1)
                return torch.tanh(flat @ w).reshape(z_scaled.shape)

            bundle = ConditionBundle(np.ones(6), 1.0, 0.0)
            cond = BatchedConditions.from_bundles(bundle, dtype=torch.float64)
            loss, d = training_loss(net, PARAMS, y, cond, rng, return_details=True)

            sigma = torch.tensor(d["sigma"])[:, :, None, None]
            sd = PARAMS.sigma_data
            c_skip = sd**2 / (sigma**2 + sd**2)
            c_out = sigma * sd / torch.sqrt(sigma**2 + sd**2)
            denoised = c_skip * d["noisy"] + c_out * d["y_pred"]
            lam = (sigma**2 + sd**2) / (sigma * sd) ** 2
            data_loss = float((lam * (denoised - y) ** 2).mean())
            assert abs(float(loss) - data_loss) / abs(data_loss) < 1e-6

    def test_grid_mode_skips_clean_steps(self):
        y = torch.tensor(Rng(8, 0).normal((1, 4, 2, 3)))
        bundle = ConditionBundle(np.ones(8), 1.0, 0.0)
        cond = BatchedConditions.from_bundles(bundle, dtype=torch.float64)
        sigma = np.array([0.0, 0.5, 1.0, 0.0])
        loss, d = training_loss(ones_net, PARAMS, y, cond, Rng(9, 0), sigma_per_step=sigma, return_details=True)
        active = (d["y_pred"] - d["y_target"])[:, [1, 2]]
        np.testing.assert_allclose(float(loss), float((active**2).mean()), rtol=1e-12)


class TestKarrasGrid:
    def test_single_step(self):
        grid = karras_grid(1, PARAMS)
        np.testing.assert_array_equal(grid.sigmas, [PARAMS.sigma_max, 0.0])

    def test_endpoints_exact(self):
        grid = karras_grid(10, PARAMS)
        assert grid.sigmas[0] == PARAMS.sigma_max
        np.testing.assert_allclose(grid.sigmas[-2], PARAMS.sigma_min, rtol=1e-12)
        assert grid.sigmas[-1] == 0.0

    def test_interior_values_closed_form(self):
        grid = karras_grid(4, PARAMS)
        for i in range(4):
            expected = (80 ** (1 / 7) + i / 3 * (0.002 ** (1 / 7) - 80 ** (1 / 7))) ** 7
            np.testing.assert_allclose(grid.sigmas[i], expected, rtol=1e-12)

    def test_strictly_decreasing(self):
        grid = karras_grid(35, PARAMS)
        assert (np.diff(grid.sigmas) < 0).all()

    def test_zero_steps_rejected(self):
        with pytest.raises(ConfigError):
            karras_grid(0, PARAMS)

    def test_noise_index_mapping(self):
        grid = karras_grid(5, PARAMS)
        assert grid.sigma_for_noise_index(0) == 0.0
        assert grid.sigma_for_noise_index(grid.steps) == PARAMS.sigma_max
        np.testing.assert_array_equal(
            grid.sigma_for_noise_index(np.array([0, 5])), [0.0, PARAMS.sigma_max]
        )
        with pytest.raises(ConfigError):
            grid.sigma_for_noise_index(6)


def run_grid(z0, sigmas, fn):
    z, hist = z0, SamplerHistory()
    for i in range(len(sigmas) - 1):
        z, hist = sampler_step(z, sigmas[i], sigmas[i + 1], fn, hist)
    return z


class TestSamplerStep:
    def test_zero_denoiser_scales_by_ratio(self):
        z = torch.full((1, 2, 1, 2), 3.0, dtype=torch.float64)
        fn = lambda z, s: torch.zeros_like(z)
        out, _ = sampler_step(z, 2.0, 1.0, fn)
        torch.testing.assert_close(out, 0.5 * z, rtol=1e-15, atol=0)

    def test_zero_denoiser_full_grid_lands_at_zero(self):
        grid = karras_grid(6, PARAMS)
        z0 = torch.tensor(Rng(1, 0).normal((1, 2, 1, 2))) * PARAMS.sigma_max
        out = run_grid(z0, grid.sigmas, lambda z, s: torch.zeros_like(z))
        assert out.abs().max() == 0.0

    def test_data_denoiser_is_fixed_point(self):
        grid = karras_grid(5, PARAMS)
        z0 = torch.tensor(Rng(2, 0).normal((1, 3, 1, 2)))
        out = run_grid(z0, grid.sigmas, lambda z, s: z.clone())
        torch.testing.assert_close(out, z0, rtol=1e-10, atol=1e-12)

    def test_constant_denoiser_three_step_grid_matches_exact_solution(self):
        a = 0.7
        grid = karras_grid(3, PARAMS)
        z0 = torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64)
        out = run_grid(z0, grid.sigmas, lambda z, s: torch.full_like(z, a))
        # exact solution of dz/dsigma = (z - a)/sigma at sigma=0 is a
        assert abs(float(out) - a) < 1e-3

    def test_multistep_order_on_affine_denoiser(self):
        # D(z) = a + b z has the exact solution
        # z(s) = (z0 - a/(1-b)) (s/s0)^(1-b) + a/(1-b)
        a, b = 0.7, 0.35
        s0, s1 = 10.0, 0.05
        z0 = 2.0
        exact = (z0 - a / (1 - b)) * (s1 / s0) ** (1 - b) + a / (1 - b)

        def terminal_error(num_steps):
            sigmas = s0 * (s1 / s0) ** np.linspace(0, 1, num_steps + 1)
            z = torch.full((1, 1, 1, 1), z0, dtype=torch.float64)
            out = run_grid(z, sigmas, lambda z, s: a + b * z)
            return abs(float(out) - exact)

        for steps in (8, 16, 32):
            assert terminal_error(steps) / terminal_error(2 * steps) >= 3.0

    def test_non_decreasing_sigma_rejected(self):
        z = torch.zeros(1, 1, 1, 1)
        fn = lambda z, s: z
        with pytest.raises(ConfigError):
            sampler_step(z, 1.0, 1.0, fn)
        with pytest.raises(ConfigError):
            sampler_step(z, 1.0, 2.0, fn)

    def test_parked_columns_untouched(self):
        z = torch.tensor(Rng(3, 0).normal((1, 3, 1, 2)))
        fn = lambda zz, s: torch.zeros_like(zz)
        sig = np.array([2.0, 2.0, 0.0])
        sig_next = np.array([1.0, 2.0, 0.0])
        out, _ = sampler_step(z, sig, sig_next, fn)
        assert torch.equal(out[0, 1], z[0, 1])
        assert torch.equal(out[0, 2], z[0, 2])
        torch.testing.assert_close(out[0, 0], 0.5 * z[0, 0], rtol=1e-15, atol=0)


class TestSampleFullSequence:
    def test_zero_denoiser_output_near_zero(self):
        den = lambda z, sigma, cond, t0: torch.zeros_like(z)  # D == 0 oracle
        bundle = ConditionBundle(np.ones(16), 1.0, 0.0)
        grid = karras_grid(8, PARAMS)
        seq = sample_full_sequence(den, bundle, 16, grid, 4, 3, Rng(0, 0), dtype=torch.float64)
        assert np.abs(seq.data).max() < 1e-3 * PARAMS.sigma_max
        assert seq.data.shape == (16, 3)

    def test_fixed_seed_reproducible(self):
        cfg = NetConfig(latent_dim=4, stack=2, widths=(8,), heads=2, cond_dim=4, emb_dim=4)
        den = Denoiser(TemporalUnet(cfg, seed=5), PARAMS)
        bundle = ConditionBundle(np.linspace(0, 4, 8), 1.0, 0.0)
        grid = karras_grid(6, PARAMS)
        a = sample_full_sequence(den, bundle, 8, grid, 2, 4, Rng(11, 0))
        b = sample_full_sequence(den, bundle, 8, grid, 2, 4, Rng(11, 0))
        np.testing.assert_array_equal(a.data, b.data)

    def test_indivisible_length_rejected(self):
        den = Denoiser(zero_net, PARAMS)
        bundle = ConditionBundle(np.ones(7), 1.0, 0.0)
        with pytest.raises(ConfigError):
            sample_full_sequence(den, bundle, 7, karras_grid(2, PARAMS), 4, 3, Rng(0, 0))
