import math

import pytest
import torch
from torch import nn

from semcom.diffusion import (
    LOG_EPS,
    SIGMA_DATA,
    DiffusionError,
    NoiseSchedule,
    ScoreNet,
    ScoreNetConfig,
    build_sigma_grid,
    denoise,
    denoiser_predict,
    precondition,
    precondition_coeffs,
    score,
    train_denoiser,
)
from semcom.latent import LatentCode
from semcom.lora import AdapterSpec, attach_scorenet_adapters

from test_swin import finite_diff_check


def _sigma_from_cnoise(c_noise: torch.Tensor) -> torch.Tensor:
    return torch.exp(4.0 * c_noise) - LOG_EPS


class _OracleNet(nn.Module):
    """Inner net that makes denoiser_predict return a chosen D exactly."""

    def _coeffs(self, z_scaled, c_noise):
        sigma = _sigma_from_cnoise(torch.as_tensor(c_noise, dtype=z_scaled.dtype))
        denom = sigma * sigma + SIGMA_DATA**2
        c_in = 1.0 / torch.sqrt(denom)
        c_skip = SIGMA_DATA**2 / denom
        c_out = sigma * SIGMA_DATA / torch.sqrt(denom)
        expand = lambda t: t.reshape(-1, *([1] * (z_scaled.ndim - 1)))
        return expand(sigma), expand(c_in), expand(c_skip), expand(c_out)

    def target(self, z, sigma):
        raise NotImplementedError

    def forward(self, z_scaled, c_noise):
        sigma, c_in, c_skip, c_out = self._coeffs(z_scaled, c_noise)
        z = z_scaled / c_in
        return (self.target(z, sigma) - c_skip * z) / c_out


class AnalyticShrinkNet(_OracleNet):
    """Exact posterior-mean denoiser for z0 ~ N(0, sd^2 I)."""

    def __init__(self, sigma_data: float = 1.0):
        super().__init__()
        self.sd2 = sigma_data**2

    def target(self, z, sigma):
        return z * self.sd2 / (self.sd2 + sigma * sigma)


class PointMassNet(_OracleNet):
    """Denoiser that always predicts a fixed clean latent z0."""

    def __init__(self, z0: torch.Tensor):
        super().__init__()
        self.register_buffer("z0", z0)

    def target(self, z, sigma):
        return self.z0.expand_as(z)


class TestSchedule:
    def test_validation(self):
        with pytest.raises(DiffusionError):
            NoiseSchedule(beta_min=0.0)
        with pytest.raises(DiffusionError):
            NoiseSchedule(beta_min=5.0, beta_max=1.0)

    def test_marginal_sigma_strictly_increasing_from_zero(self):
        sch = NoiseSchedule()
        ts = torch.linspace(0, 1, 11)
        sig = sch.marginal_sigma(ts)
        assert float(sig[0]) == 0.0
        assert bool((sig[1:] > sig[:-1]).all())


class TestForwardDiffuse:
    def test_t_zero_is_identity(self):
        from semcom.diffusion import forward_diffuse

        z = LatentCode(torch.randn(4, 32), (1, 1, 32))
        out = forward_diffuse(z, 0.0, NoiseSchedule(), torch.Generator().manual_seed(0))
        assert torch.allclose(out.values, z.values, atol=1e-12)

    @pytest.mark.parametrize("t", [0.1, 0.3, 0.5, 0.7, 0.9])
    def test_marginal_variance_matches_closed_form(self, t):
        from semcom.diffusion import forward_diffuse

        sch = NoiseSchedule()
        z = torch.full((100_000, 4), 0.8)
        rng = torch.Generator().manual_seed(42)
        out = forward_diffuse(z, t, sch, rng)
        expected_std = float(sch.marginal_sigma(t))
        measured_std = float(out.std(unbiased=True))
        assert measured_std == pytest.approx(expected_std, rel=0.02)
        expected_mean = float(sch.signal_scale(t)) * 0.8
        assert float(out.mean()) == pytest.approx(expected_mean, abs=4 * expected_std / math.sqrt(400_000))

    def test_bad_time_rejected(self):
        from semcom.diffusion import forward_diffuse

        z = torch.randn(2, 8)
        with pytest.raises(DiffusionError):
            forward_diffuse(z, 1.5, NoiseSchedule(), torch.Generator())


class TestPrecondition:
    def test_known_values(self):
        c_in, _ = precondition_coeffs(0.0)
        assert float(c_in) == pytest.approx(1.0 / SIGMA_DATA, rel=1e-6)  # = 2.0
        c_in, _ = precondition_coeffs(SIGMA_DATA)
        assert float(c_in) == pytest.approx(1.0 / (SIGMA_DATA * math.sqrt(2.0)), rel=1e-6)

    def test_monotone_decreasing(self):
        sigmas = torch.linspace(0, 3, 25)
        c_in, _ = precondition_coeffs(sigmas)
        assert bool((c_in[1:] < c_in[:-1]).all())

    def test_scaled_input(self):
        z = torch.randn(2, 3, 4, 4)
        scaled, c_noise = precondition(z, 0.5)
        assert torch.allclose(scaled, z / math.sqrt(0.25 + 0.25))
        assert float(c_noise) == pytest.approx(math.log(0.5 + LOG_EPS) / 4.0)

    def test_negative_sigma_rejected(self):
        with pytest.raises(DiffusionError):
            precondition_coeffs(-0.1)


class TestScore:
    def test_point_mass_score(self):
        z0 = torch.randn(1, 2, 3, 3)
        net = PointMassNet(z0)
        z = torch.randn(4, 2, 3, 3)
        sigma = 0.7
        s = score(z, sigma, net)
        assert torch.allclose(s, (z0 - z) / sigma**2, atol=1e-5)

    def test_gaussian_score_matches_formula(self):
        net = AnalyticShrinkNet(sigma_data=1.0)
        z = torch.randn(5, 2, 4, 4)
        for sigma in (0.2, 0.8, 1.5):
            s = score(z, sigma, net)
            assert torch.allclose(s, -z / (1.0 + sigma**2), atol=1e-5)

    def test_sigma_zero_rejected(self):
        net = AnalyticShrinkNet()
        with pytest.raises(DiffusionError):
            score(torch.randn(1, 2, 2, 2), 0.0, net)

    def test_literal_parameterization_flag(self):
        z0 = torch.zeros(1, 2, 3, 3)
        net = PointMassNet(z0)
        z = torch.randn(2, 2, 3, 3)
        s = score(z, 0.5, net, literal=True)
        assert torch.allclose(s, torch.zeros_like(s), atol=1e-6)  # D == 0 here

    def test_zero_init_adapters_preserve_score(self):
        torch.manual_seed(0)
        net = ScoreNet(ScoreNetConfig(channels=4, width=8, n_blocks=2, time_dim=16, gn_groups=4))
        with torch.no_grad():  # make the block path visible past the zeroed output conv
            net.conv_out.weight.normal_(generator=torch.Generator().manual_seed(5))
        z = torch.randn(3, 4, 6, 6)
        base = score(z, 0.4, net)
        attach_scorenet_adapters(net, AdapterSpec("denoiser", 2), torch.Generator().manual_seed(1))
        adapted = score(z, 0.4, net)
        assert torch.equal(base, adapted)


class TestSigmaGrid:
    def test_scalar_grid_shape_and_endpoints(self):
        grid = build_sigma_grid(1.0, 18)
        assert grid.shape == (19,)
        assert float(grid[0]) == pytest.approx(1.0)
        assert float(grid[-1]) == 0.0
        assert bool((grid[:-1][1:] < grid[:-1][:-1]).all())  # strictly decreasing above 0

    def test_batched_grid(self):
        grid = build_sigma_grid(torch.tensor([0.5, 1.0, 0.001]), 6)
        assert grid.shape == (7, 3)
        assert bool((grid[-1] == 0).all())

    def test_invalid_steps(self):
        with pytest.raises(DiffusionError):
            build_sigma_grid(1.0, 0)


class TestDenoise:
    def latent(self, batch=4, seed=0):
        g = torch.Generator().manual_seed(seed)
        return LatentCode(torch.randn(batch, 32, generator=g), (4, 4, 2))

    @pytest.mark.parametrize("mode", ["heun", "alg1"])
    def test_identity_at_zero_sigma(self, mode):
        net = AnalyticShrinkNet()
        z = self.latent()
        out = denoise(z, 0.0, net, steps=8, mode=mode)
        assert torch.equal(out.values, z.values)

    def test_per_sample_zero_levels_untouched(self):
        net = AnalyticShrinkNet()
        z = self.latent(batch=3)
        levels = torch.tensor([0.0, 0.5, 0.0])
        out = denoise(z, levels, net, steps=6)
        assert torch.equal(out.values[0], z.values[0])
        assert torch.equal(out.values[2], z.values[2])
        assert not torch.allclose(out.values[1], z.values[1])

    @pytest.mark.parametrize("sigma_max", [0.5, 1.0])
    def test_heun_hits_gaussian_posterior_mean(self, sigma_max):
        net = AnalyticShrinkNet(sigma_data=1.0)
        z = self.latent(batch=8, seed=3)
        out = denoise(z, sigma_max, net, steps=50, mode="heun")
        expected = z.values / (1.0 + sigma_max**2)
        err = float((out.values - expected).norm() / expected.norm())
        assert err < 0.01

    def test_alg1_euler_converges_more_coarsely(self):
        net = AnalyticShrinkNet(sigma_data=1.0)
        z = self.latent(batch=8, seed=4)
        out = denoise(z, 0.8, net, steps=50, mode="alg1")
        expected = z.values / (1.0 + 0.64)
        err = float((out.values - expected).norm() / expected.norm())
        assert err < 0.05

    def test_unknown_mode_rejected(self):
        with pytest.raises(DiffusionError):
            denoise(self.latent(), 0.5, AnalyticShrinkNet(), mode="sde")


class TestScoreNetTraining:
    def make_net(self, channels=2, width=16, seed=0):
        torch.manual_seed(seed)
        return ScoreNet(ScoreNetConfig(channels=channels, width=width, n_blocks=2, time_dim=32, gn_groups=2))

    def test_zero_init_predicts_skip_path(self):
        # fresh net has a zeroed output projection: D = c_skip * z exactly
        net = self.make_net()
        z = torch.randn(3, 2, 4, 4)
        c_skip = SIGMA_DATA**2 / (0.5**2 + SIGMA_DATA**2)
        assert torch.allclose(denoiser_predict(net, z, 0.5), c_skip * z, atol=1e-7)

    def test_single_step_reduces_loss(self):
        net = self.make_net(seed=1)
        z = torch.randn(16, 2, 4, 4)
        sigma = torch.full((16,), 0.5)
        noisy = z + sigma.reshape(-1, 1, 1, 1) * torch.randn_like(z)
        opt = torch.optim.Adam(net.parameters(), lr=1e-2)
        loss0 = torch.nn.functional.mse_loss(denoiser_predict(net, noisy, sigma), z)
        loss0.backward()
        opt.step()
        with torch.no_grad():
            loss1 = torch.nn.functional.mse_loss(denoiser_predict(net, noisy, sigma), z)
        assert float(loss1) < float(loss0)

    def test_point_mass_memorization(self):
        net = self.make_net(seed=2)
        # one clean latent, constant per channel so the conv biases can carry it
        z0 = torch.tensor([0.6, -0.4]).reshape(1, 2, 1, 1).expand(1, 2, 4, 4).contiguous()
        rng = torch.Generator().manual_seed(0)
        history = train_denoiser(
            net, z0.expand(8, 2, 4, 4).contiguous(), epochs=150, batch_size=8, lr=3e-3, sigma_range=(0.05, 0.8), rng=rng
        )
        assert history["loss"][-1] < 0.01
        # any noisy view of the point mass denoises back to it
        g = torch.Generator().manual_seed(99)
        for sigma in (0.2, 0.4):
            probe = z0 + sigma * torch.randn(64, 2, 4, 4, generator=g)
            with torch.no_grad():
                d = denoiser_predict(net, probe, torch.full((64,), sigma))
            assert float((d - z0).square().mean().sqrt()) < 0.12

    def test_gaussian_shrinkage_learned(self):
        net = self.make_net(seed=3)
        g = torch.Generator().manual_seed(7)
        latents = torch.randn(4096, 2, 4, 4, generator=g)  # z0 ~ N(0, I)
        train_denoiser(net, latents, epochs=100, batch_size=128, lr=2e-3, sigma_range=(0.1, 1.5), rng=g)
        for sigma in (0.4, 1.0):
            z0 = torch.randn(512, 2, 4, 4, generator=g)
            noisy = z0 + sigma * torch.randn(512, 2, 4, 4, generator=g)
            with torch.no_grad():
                d = denoiser_predict(net, noisy, torch.full((512,), sigma))
            expected = noisy / (1.0 + sigma**2)
            rel = float((d - expected).norm() / expected.norm())
            assert rel < 0.10, f"sigma={sigma}: relative RMS {rel:.3f}"

    def test_empty_dataset_rejected(self):
        net = self.make_net()
        with pytest.raises(DiffusionError):
            train_denoiser(net, torch.empty(0, 2, 4, 4), rng=torch.Generator())

    def test_denoiser_gradient_matches_finite_differences(self):
        net = self.make_net(seed=4).double()
        z = torch.randn(2, 2, 4, 4, dtype=torch.float64)
        target = torch.randn(2, 2, 4, 4, dtype=torch.float64)
        sigma = torch.tensor([0.3, 0.9], dtype=torch.float64)

        def f():
            return torch.nn.functional.mse_loss(denoiser_predict(net, z, sigma), target)

        params = [net.blocks[0].conv1.weight, net.blocks[1].conv2.weight, net.blocks[0].time_proj.weight, net.conv_out.weight]
        assert finite_diff_check(f, params) < 1e-4
