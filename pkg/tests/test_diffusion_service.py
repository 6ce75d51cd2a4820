"""
Unit tests for the noise schedule, forward noising and DDIM sampling.
"""

import math

import pytest
import torch

from diffprompt.core.exceptions import ConfigurationError, OutOfRangeError, ShapeMismatchError
from diffprompt.core.seeding import seeded_randn
from diffprompt.services.diffusion_service import (
    build_cosine_schedule,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    diffusion_loss,
    forward_noise,
    forward_noise_step,
)


class OracleDenoiser:
    """Predicts the exact noise that maps z_t back onto a fixed clean latent."""

    def __init__(self, z0: torch.Tensor, sched) -> None:
        self.z0 = z0
        self.sched = sched
        self.calls = 0

    def __call__(self, z_t, t, cond):
        self.calls += 1
        a, b = self.sched.coefficients(t, z_t)
        return (z_t - a * self.z0) / b


class TestSchedule:
    """Tests for the capped cosine schedule."""

    def test_alpha_bar_monotone(self):
        """Test alpha_bar starts at 1, decreases strictly and ends near 0."""
        sched = build_cosine_schedule(100)
        ab = sched.alpha_bar
        assert ab.shape == (101,)
        assert float(ab[0]) == 1.0
        assert bool((ab[1:] < ab[:-1]).all())
        assert float(ab[-1]) < 1e-3

    def test_betas_capped(self):
        """Test betas stay in (0, beta_cap]."""
        sched = build_cosine_schedule(50, beta_cap=0.999)
        assert bool((sched.beta > 0).all())
        assert float(sched.beta.max()) <= 0.999

    def test_too_few_steps(self):
        """Test that T < 2 is rejected."""
        with pytest.raises(ConfigurationError):
            build_cosine_schedule(1)

    def test_digest_is_stable(self):
        """Test that equal schedules share a digest."""
        assert build_cosine_schedule(20).digest() == build_cosine_schedule(20).digest()
        assert build_cosine_schedule(20).digest() != build_cosine_schedule(40).digest()


class TestForwardNoise:
    """Tests for closed-form and stepwise noising."""

    def test_closed_form_matches_iterated_mean(self):
        """Test that iterating noise-free steps reproduces sqrt(alpha_bar_t)·z0."""
        sched = build_cosine_schedule(20)
        z0 = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        z = z0.clone()
        for t in range(1, 21):
            z = forward_noise_step(z, t, torch.zeros_like(z), sched)
            closed = forward_noise(z0, t, torch.zeros_like(z0), sched)
            assert torch.allclose(z, closed, atol=1e-5)

    def test_closed_form_matches_iterated_variance(self):
        """Test that the stepwise noise variance accumulates to 1 - alpha_bar_t."""
        sched = build_cosine_schedule(20)
        var = 0.0
        for t in range(1, 21):
            beta = sched.beta_at(t)
            var = (1.0 - beta) * var + beta
            assert abs(var - (1.0 - float(sched.alpha_bar[t]))) <= 1e-5

    def test_per_row_timesteps(self):
        """Test a batch of different timesteps."""
        sched = build_cosine_schedule(20)
        z0 = torch.ones(3, 4, 2, 2)
        eps = torch.zeros_like(z0)
        t = torch.tensor([1, 10, 20])
        z = forward_noise(z0, t, eps, sched)
        for row in range(3):
            expected = float(sched.alpha_bar[int(t[row])]) ** 0.5
            assert torch.allclose(z[row], torch.full_like(z[row], expected), atol=1e-6)

    def test_timestep_out_of_range(self):
        """Test that t outside [1, T] is rejected."""
        sched = build_cosine_schedule(20)
        z0 = torch.zeros(1, 4, 2, 2)
        with pytest.raises(OutOfRangeError):
            forward_noise(z0, 0, z0, sched)
        with pytest.raises(OutOfRangeError):
            forward_noise(z0, 21, z0, sched)

    def test_eps_shape_mismatch(self):
        """Test that noise must match the latent shape."""
        sched = build_cosine_schedule(20)
        with pytest.raises(ShapeMismatchError):
            forward_noise(torch.zeros(1, 4, 2, 2), 1, torch.zeros(1, 4, 2, 3), sched)

    def test_loss_zero_for_exact_prediction(self):
        """Test the MSE objective."""
        eps = torch.randn(2, 4, 2, 2)
        assert float(diffusion_loss(eps, eps)) == 0.0
        assert float(diffusion_loss(torch.zeros_like(eps), torch.ones_like(eps))) == pytest.approx(1.0)


class TestDdim:
    """Tests for deterministic DDIM sampling."""

    def test_timesteps(self):
        """Test the retained timesteps run from T down to 0."""
        assert ddim_timesteps(100, 25)[:3] == [100, 96, 92]
        assert ddim_timesteps(100, 25)[-1] == 0
        assert len(ddim_timesteps(100, 25)) == 26
        assert ddim_timesteps(20, 20) == list(range(20, -1, -1))

    def test_incompatible_sampling_steps(self):
        """Test that T_sample must divide T and not exceed it."""
        with pytest.raises(ConfigurationError):
            ddim_timesteps(20, 30)
        with pytest.raises(ConfigurationError):
            ddim_timesteps(20, 3)

    def test_same_seed_same_trajectory(self):
        """Test that a fixed seed reproduces every latent bit for bit."""
        sched = build_cosine_schedule(20)
        model = lambda z, t, cond: 0.5 * z + cond
        cond = torch.full((2, 4, 2, 2), 0.1)
        a = ddim_sample(model, cond, sched, 5, 123, shape=(2, 4, 2, 2))
        b = ddim_sample(model, cond, sched, 5, 123, shape=(2, 4, 2, 2))
        assert a.T_sample == 5
        assert a.timesteps == (20, 16, 12, 8, 4, 0)
        assert a.condition_digest == b.condition_digest
        for x, y in zip(a.latents, b.latents):
            assert torch.equal(x, y)

    def test_per_row_seeds_independent_of_batch(self):
        """Test that a row's trajectory depends only on its own seed."""
        sched = build_cosine_schedule(20)
        model = lambda z, t, cond: 0.1 * z
        pair = ddim_sample(model, None, sched, 5, [11, 12], shape=(2, 4, 2, 2))
        single = ddim_sample(model, None, sched, 5, [12], shape=(1, 4, 2, 2))
        assert torch.equal(pair.latents[-1][1], single.latents[-1][0])

    def test_subsampled_trajectory_consistent(self):
        """Test that a coarse oracle trajectory visits the fine trajectory's latents."""
        sched = build_cosine_schedule(20)
        z0 = torch.randn(1, 4, 2, 2, dtype=torch.float64)
        fine = ddim_sample(OracleDenoiser(z0, sched), None, sched, 20, 5, shape=(1, 4, 2, 2), dtype=torch.float64)
        coarse = ddim_sample(OracleDenoiser(z0, sched), None, sched, 5, 5, shape=(1, 4, 2, 2), dtype=torch.float64)
        for s in range(6):
            assert torch.allclose(coarse.at(s), fine.at(4 * s), atol=1e-4)
        assert torch.allclose(fine.at(20), z0, atol=1e-4)

    def test_model_called_once_per_step(self):
        """Test T_sample noise predictions per run."""
        sched = build_cosine_schedule(20)
        oracle = OracleDenoiser(torch.zeros(1, 4, 2, 2), sched)
        ddim_sample(oracle, None, sched, 4, 0, shape=(1, 4, 2, 2))
        assert oracle.calls == 4

    def test_trajectory_index_bounds(self):
        """Test that trajectory steps outside [0, T_sample] are rejected."""
        sched = build_cosine_schedule(20)
        traj = ddim_sample(lambda z, t, c: z, None, sched, 5, 0, shape=(1, 4, 2, 2))
        with pytest.raises(OutOfRangeError):
            traj.at(6)

    def test_zero_noise_prediction_unrolls_in_closed_form(self):
        """Test that with eps_hat = 0 every latent is z_T·sqrt(alpha_bar[tau_s] / alpha_bar[T])."""
        sched = build_cosine_schedule(20)
        zero = lambda z, t, cond: torch.zeros_like(z)
        traj = ddim_sample(zero, None, sched, 5, 17, shape=(2, 4, 2, 2), dtype=torch.float64)
        z_T = traj.at(0)
        for s, tau in enumerate(traj.timesteps):
            scale = math.sqrt(float(sched.alpha_bar[tau]) / float(sched.alpha_bar[sched.T]))
            assert torch.allclose(traj.at(s), z_T * scale, rtol=1e-9, atol=0.0)
        assert torch.allclose(traj.at(5), z_T / math.sqrt(float(sched.alpha_bar[sched.T])), rtol=1e-9, atol=0.0)

    def test_inputs_not_mutated(self):
        """Test that sampling leaves the condition and the initial draw untouched."""
        sched = build_cosine_schedule(20)
        cond = torch.randn(2, 4, 2, 2)
        before = cond.clone()
        model = lambda z, t, c: 0.3 * z + c
        traj = ddim_sample(model, cond, sched, 5, [3, 4], shape=(2, 4, 2, 2))
        assert torch.equal(cond, before)
        assert torch.equal(traj.at(0), seeded_randn((2, 4, 2, 2), [3, 4]))
        assert len({id(latent) for latent in traj.latents}) == 6

    def test_first_step_amplifies_prediction_error_unclipped(self):
        """Test that an error in eps_hat at t = T reaches the update scaled by 1/sqrt(alpha_bar[T]), unclipped."""
        sched = build_cosine_schedule(20)
        z = torch.zeros(1, 4, 2, 2, dtype=torch.float64)
        error = torch.full_like(z, 0.1)
        out = ddim_step(z, error, 20, 16, sched)
        ab_T, ab_next = float(sched.alpha_bar[20]), float(sched.alpha_bar[16])
        expected = -0.1 * math.sqrt(1 - ab_T) / math.sqrt(ab_T) * math.sqrt(ab_next) + 0.1 * math.sqrt(1 - ab_next)
        assert torch.allclose(out, torch.full_like(z, expected), rtol=1e-9, atol=0.0)
        assert float(out.abs().max()) > 1.0


class TestScheduleValues:
    """Tests that pin schedule values against the squared-cosine formula."""

    @staticmethod
    def _f(t: float, T: int, s: float) -> float:
        return math.cos(((t / T + s) / (1.0 + s)) * math.pi / 2) ** 2

    def test_alpha_bar_midpoint(self):
        """Test alpha_bar[50] at T = 100, s = 0.008 against f(50)/f(0)."""
        sched = build_cosine_schedule(100, s=0.008)
        expected = self._f(50, 100, 0.008) / self._f(0, 100, 0.008)
        assert float(sched.alpha_bar[50]) == pytest.approx(expected, rel=1e-10)
        assert float(sched.alpha_bar[50]) == pytest.approx(0.4938, abs=1e-3)

    def test_uncapped_betas_match_ratios(self):
        """Test that betas away from the end equal 1 - f(t)/f(t-1)."""
        sched = build_cosine_schedule(100, s=0.008)
        for t in (1, 25, 50, 75):
            expected = 1.0 - self._f(t, 100, 0.008) / self._f(t - 1, 100, 0.008)
            assert sched.beta_at(t) == pytest.approx(expected, rel=1e-9)
        assert sched.beta_at(100) == pytest.approx(0.999)

    def test_fully_noised_latents_are_standard_normal(self):
        """Test that z_T has mean near 0 and variance near 1 whatever z0 is."""
        sched = build_cosine_schedule(100)
        generator = torch.Generator().manual_seed(5)
        z0 = torch.full((64, 4, 16, 16), 3.0, dtype=torch.float64)
        eps = torch.randn(z0.shape, generator=generator, dtype=torch.float64)
        z_T = forward_noise(z0, 100, eps, sched)
        assert abs(float(z_T.mean())) < 0.02
        assert float(z_T.var()) == pytest.approx(1.0, abs=0.02)

    def test_initial_draw_is_standard_normal(self):
        """Test the statistics of the sampler's initial latent."""
        sched = build_cosine_schedule(20)
        traj = ddim_sample(lambda z, t, c: z, None, sched, 5, 9, shape=(64, 4, 16, 16))
        assert abs(float(traj.at(0).mean())) < 0.02
        assert float(traj.at(0).var()) == pytest.approx(1.0, abs=0.02)
