"""
Noise schedule, forward noising and deterministic DDIM sampling.

This module provides:
- The squared-cosine (capped) schedule with float64 tables
- Closed-form forward noising and the noise-prediction loss
- DDIM (eta = 0) sampling that retains every intermediate latent

Python 3.13 Compatible.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import torch
import torch.nn.functional as F

from diffprompt.core.exceptions import ConfigurationError, OutOfRangeError, ShapeMismatchError
from diffprompt.core.seeding import seeded_randn


# ============================================================
# Schedule
# ============================================================

@dataclass(frozen=True)
class NoiseSchedule:
    """
    Immutable alpha-bar / beta tables.

    ``alpha_bar`` has length T+1 with ``alpha_bar[0] == 1``; ``beta`` has
    length T and ``beta[t - 1]`` is the noise added by step t.
    """

    T: int
    alpha_bar: torch.Tensor
    beta: torch.Tensor
    s: float = 0.008
    beta_cap: float = 0.999

    def beta_at(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.beta[t - 1])

    def check_timestep(self, t: int | torch.Tensor, low: int = 1) -> None:
        values = t if isinstance(t, torch.Tensor) else torch.tensor([t])
        if values.numel() and (int(values.min()) < low or int(values.max()) > self.T):
            raise OutOfRangeError("timestep", values.tolist(), f"[{low}, {self.T}]")

    def digest(self) -> str:
        """SHA-256 of the alpha-bar table; recorded in generator checkpoints."""
        return hashlib.sha256(self.alpha_bar.numpy().astype("<f8").tobytes()).hexdigest()

    def coefficients(self, t: int | torch.Tensor, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(sqrt(alpha_bar[t]), sqrt(1 - alpha_bar[t])) broadcastable against ``like``."""
        ab = self.alpha_bar[t] if isinstance(t, int) else self.alpha_bar[t.cpu()]
        ab = ab.reshape(-1, *([1] * (like.dim() - 1))) if ab.dim() else ab
        ab = ab.to(device=like.device, dtype=like.dtype)
        return ab.sqrt(), (1.0 - ab).sqrt()


def build_cosine_schedule(T: int, s: float = 0.008, beta_cap: float = 0.999) -> NoiseSchedule:
    """
    Build the capped squared-cosine schedule.

    alpha_bar[t] = f(t)/f(0) with f(t) = cos²(((t/T + s)/(1 + s))·π/2); betas are
    derived from consecutive ratios, clipped to ``beta_cap``, and alpha_bar is
    recomputed from the clipped betas.

    Raises:
        ConfigurationError: If T < 2
    """
    if T < 2:
        raise ConfigurationError("Noise schedule needs at least 2 steps", field="diffusion.T_forward", value=T)
    steps = torch.arange(T + 1, dtype=torch.float64)
    f = torch.cos(((steps / T + s) / (1.0 + s)) * (math.pi / 2)) ** 2
    raw = f / f[0]
    beta = torch.clamp(1.0 - raw[1:] / raw[:-1], max=beta_cap)
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - beta, dim=0)])
    return NoiseSchedule(T=T, alpha_bar=alpha_bar, beta=beta, s=s, beta_cap=beta_cap)


# ============================================================
# Forward process and loss
# ============================================================

def forward_noise(
    z0: torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """
    Closed-form noising z_t = sqrt(ab_t)·z0 + sqrt(1 - ab_t)·eps.

    Args:
        z0: Clean latents B×C×h×w
        t: One step for the whole batch, or a LongTensor of B steps in [1, T]
        eps: Noise shaped like z0
        sched: Noise schedule

    Raises:
        ShapeMismatchError: If eps and z0 differ in shape
        OutOfRangeError: If a step lies outside [1, T]
    """
    if eps.shape != z0.shape:
        raise ShapeMismatchError("forward_noise eps", tuple(z0.shape), tuple(eps.shape))
    if isinstance(t, torch.Tensor) and t.dim() and t.shape[0] != z0.shape[0]:
        raise ShapeMismatchError("forward_noise timesteps", (z0.shape[0],), tuple(t.shape))
    sched.check_timestep(t)
    a, b = sched.coefficients(t, z0)
    return a * z0 + b * eps


def forward_noise_step(z_prev: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One Markov noising step z_t = sqrt(1 - beta_t)·z_{t-1} + sqrt(beta_t)·eps."""
    if eps.shape != z_prev.shape:
        raise ShapeMismatchError("forward_noise_step eps", tuple(z_prev.shape), tuple(eps.shape))
    beta = sched.beta_at(t)
    return math.sqrt(1.0 - beta) * z_prev + math.sqrt(beta) * eps


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if eps_hat.shape != eps.shape:
        raise ShapeMismatchError("diffusion_loss", tuple(eps.shape), tuple(eps_hat.shape))
    return F.mse_loss(eps_hat, eps)


# ============================================================
# DDIM sampling
# ============================================================

class NoisePredictor(Protocol):
    def __call__(self, z_t: torch.Tensor, t: torch.Tensor, cond: Any) -> torch.Tensor: ...


@dataclass(frozen=True)
class LatentTrajectory:
    """
    Latents of one DDIM run; ``latents[s]`` follows s completed steps.

    ``latents[0]`` is the initial draw and ``latents[-1]`` the final latent.
    """

    latents: tuple[torch.Tensor, ...]
    timesteps: tuple[int, ...]
    condition_digest: str
    seed: int | tuple[int, ...]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def T_sample(self) -> int:
        return len(self.latents) - 1

    def at(self, s: int) -> torch.Tensor:
        if not 0 <= s <= self.T_sample:
            raise OutOfRangeError("trajectory step", s, f"[0, {self.T_sample}]")
        return self.latents[s]


def ddim_timesteps(T: int, T_sample: int) -> list[int]:
    """
    Retained timesteps tau_0 = T > ... > tau_{T_sample} = 0.

    Raises:
        ConfigurationError: If T_sample > T or T is not divisible by T_sample
    """
    if T_sample < 1 or T_sample > T:
        raise ConfigurationError("T_sample must lie in [1, T]", field="diffusion.T_sample", value=T_sample)
    if T % T_sample:
        raise ConfigurationError("T must be divisible by T_sample", field="diffusion.T_sample", value=T_sample)
    stride = T // T_sample
    return [T - k * stride for k in range(T_sample + 1)]


def condition_digest(cond: Any) -> str:
    """SHA-256 over the bytes of a condition (a tensor, an object with ``tensors()``, or None)."""
    if cond is None:
        tensors: tuple[torch.Tensor, ...] = ()
    elif isinstance(cond, torch.Tensor):
        tensors = (cond,)
    else:
        tensors = tuple(cond.tensors())
    digest = hashlib.sha256()
    for tensor in tensors:
        data = tensor.detach().cpu().contiguous()
        digest.update(str(tuple(data.shape)).encode("utf-8"))
        digest.update(data.numpy().tobytes())
    return digest.hexdigest()


def ddim_step(
    z: torch.Tensor,
    eps_hat: torch.Tensor,
    t_cur: int,
    t_next: int,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """
    Deterministic update t_cur -> t_next through the predicted clean latent.

    The clean-latent estimate divides by sqrt(alpha_bar[t_cur]). At t_cur = T that
    factor is small (the capped schedule keeps it above zero), so noise-prediction
    error is amplified by up to 1/sqrt(alpha_bar[T]) in the estimate. The estimate
    is not clipped; with an exact predictor the update is exact.
    """
    a_cur, b_cur = sched.coefficients(t_cur, z)
    a_next, b_next = sched.coefficients(t_next, z)
    x0 = (z - b_cur * eps_hat) / a_cur
    return a_next * x0 + b_next * eps_hat


def ddim_sample(
    model: NoisePredictor,
    cond: Any,
    sched: NoiseSchedule,
    T_sample: int,
    seed: int | Sequence[int],
    *,
    shape: tuple[int, ...],
    dtype: torch.dtype = torch.float32,
    device: str | torch.device = "cpu",
) -> LatentTrajectory:
    """
    Run deterministic DDIM and keep all T_sample + 1 latents.

    Args:
        model: Noise predictor called as model(z_t, t, cond)
        cond: Condition passed through to the predictor
        sched: Noise schedule
        T_sample: Sampling steps (stride T / T_sample)
        seed: One seed for the batch, or one seed per row
        shape: Latent batch shape B×C×h×w
        dtype: Latent dtype
        device: Latent device

    Returns:
        LatentTrajectory with latents[0] the initial draw

    Raises:
        ConfigurationError: If T_sample is incompatible with the schedule
    """
    taus = ddim_timesteps(sched.T, T_sample)
    seeds = int(seed) if isinstance(seed, int) else [int(s) for s in seed]
    z = seeded_randn(tuple(shape), seeds, dtype=dtype, device=device)
    latents = [z]
    with torch.no_grad():
        for t_cur, t_next in zip(taus[:-1], taus[1:]):
            t_batch = torch.full((shape[0],), t_cur, dtype=torch.long, device=device)
            eps_hat = model(z, t_batch, cond)
            if eps_hat.shape != z.shape:
                raise ShapeMismatchError("predicted noise", tuple(z.shape), tuple(eps_hat.shape))
            z = ddim_step(z, eps_hat, t_cur, t_next, sched)
            latents.append(z)
    return LatentTrajectory(
        latents=tuple(latents),
        timesteps=tuple(taus),
        condition_digest=condition_digest(cond),
        seed=seeds if isinstance(seeds, int) else tuple(seeds),
    )
