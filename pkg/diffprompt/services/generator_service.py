"""
Prompt-generator (DiT) operations and stage-2 training.

This module provides:
- Condition construction from frozen-grounder features
- The noise predictor used by DDIM and its trajectory sampler
- The stage-2 training step and held-out diffusion loss

Python 3.13 Compatible.
"""

from __future__ import annotations

import logging
from typing import Sequence

import torch

from diffprompt.core.seeding import torch_generator
from diffprompt.models.dit import Condition, DitModel
from diffprompt.models.grounder import GrounderFeatures, GrounderModel
from diffprompt.models.mask_vae import MaskVae
from diffprompt.schemas.config import LATENT_CHANNELS, VAE_DOWNSAMPLE, RunConfig
from diffprompt.schemas.report import StageReport
from diffprompt.services.base_service import StageService
from diffprompt.services.checkpoint_service import assert_frozen
from diffprompt.services.data_service import SampleBatch, SampleDataset
from diffprompt.services.diffusion_service import (
    LatentTrajectory,
    NoiseSchedule,
    build_cosine_schedule,
    ddim_sample,
    diffusion_loss,
    forward_noise,
)
from diffprompt.services.grounder_service import build_grounder
from diffprompt.services.vae_service import build_vae, reparameterize

logger = logging.getLogger(__name__)


def build_dit(cfg: RunConfig) -> DitModel:
    scene = cfg.corpus.scene
    grounder = cfg.grounder
    return DitModel(
        cfg.dit,
        latent_size=scene.image_size // VAE_DOWNSAMPLE,
        vis_dim=grounder.width,
        txt_dim=grounder.width,
        num_vis_tokens=(scene.image_size // grounder.patch_size) ** 2,
        num_txt_tokens=scene.caption_len,
    )


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    return build_cosine_schedule(cfg.diffusion.T_forward, cfg.diffusion.cosine_s, cfg.diffusion.beta_cap)


# ============================================================
# Conditioning
# ============================================================

@torch.no_grad()
def grounder_features(grounder: GrounderModel, images: torch.Tensor, captions: torch.Tensor) -> GrounderFeatures:
    """
    Prompt-free final-layer features of a frozen grounder.

    Raises:
        FreezeViolationError: If the grounder has trainable parameters
    """
    assert_frozen(grounder, "grounder")
    return grounder.encode(images, captions)


def _timesteps(t: int | torch.Tensor, batch: int, device: torch.device) -> torch.Tensor:
    if isinstance(t, int):
        return torch.full((batch,), t, dtype=torch.long, device=device)
    return t.to(device=device, dtype=torch.long).expand(batch) if t.dim() == 0 else t.to(device)


def condition_from_features(model: DitModel, features: GrounderFeatures, t: int | torch.Tensor) -> Condition:
    t = _timesteps(t, features.vis.shape[0], features.vis.device)
    return model.embed_condition(features.vis, features.txt, features.txt_pad_mask, t)


def build_condition(
    grounder: GrounderModel,
    model: DitModel,
    images: torch.Tensor,
    captions: torch.Tensor,
    t: int | torch.Tensor,
    sched: NoiseSchedule,
) -> Condition:
    """
    Condition tokens [visual, textual] for timestep(s) ``t``.

    Raises:
        FreezeViolationError: If the grounder is not frozen
        OutOfRangeError: If a timestep lies outside [1, T]
        ShapeMismatchError: If images or captions are malformed
    """
    sched.check_timestep(t)
    return condition_from_features(model, grounder_features(grounder, images, captions), t)


def predict_noise(model: DitModel, z_t: torch.Tensor, cond: Condition) -> torch.Tensor:
    return model(z_t, cond)


class DitDenoiser:
    """Noise predictor over grounder features; the condition is rebuilt for every timestep."""

    def __init__(self, model: DitModel) -> None:
        self.model = model

    def __call__(self, z_t: torch.Tensor, t: torch.Tensor, features: GrounderFeatures) -> torch.Tensor:
        return predict_noise(self.model, z_t, condition_from_features(self.model, features, t))


def sample_trajectory(
    model: DitModel,
    features: GrounderFeatures,
    sched: NoiseSchedule,
    T_sample: int,
    seeds: int | Sequence[int],
) -> LatentTrajectory:
    """DDIM trajectory of mask latents for a batch of grounder features."""
    side = model.latent_size
    return ddim_sample(
        DitDenoiser(model),
        features,
        sched,
        T_sample,
        seeds,
        shape=(features.vis.shape[0], LATENT_CHANNELS, side, side),
        dtype=features.vis.dtype,
        device=features.vis.device,
    )


# ============================================================
# Training
# ============================================================

@torch.no_grad()
def encode_targets(
    vae: MaskVae,
    masks: torch.Tensor,
    generator: torch.Generator,
    use_mean_latent: bool = False,
) -> torch.Tensor:
    """Clean latents z0 of target masks: a posterior sample, or its mean."""
    mu, log_var = vae.encode(masks)
    if use_mean_latent:
        return mu
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype).to(mu.device)
    return reparameterize(mu, log_var, eps)


def generator_train_step(
    model: DitModel,
    vae: MaskVae,
    grounder: GrounderModel,
    batch: SampleBatch,
    sched: NoiseSchedule,
    generator: torch.Generator,
    use_mean_latent: bool = False,
) -> torch.Tensor:
    """
    Diffusion loss of one batch; t ~ U[1, T] and all noise drawn from ``generator``.

    Raises:
        FreezeViolationError: If the VAE or grounder is trainable or holds gradients
    """
    assert_frozen(vae, "mask_vae")
    assert_frozen(grounder, "grounder")
    device = batch.images.device
    t = torch.randint(1, sched.T + 1, (len(batch),), generator=generator).to(device)
    z0 = encode_targets(vae, batch.masks, generator, use_mean_latent)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(device)
    z_t = forward_noise(z0, t, eps, sched)
    cond = build_condition(grounder, model, batch.images, batch.captions, t, sched)
    return diffusion_loss(predict_noise(model, z_t, cond), eps)


@torch.no_grad()
def heldout_diffusion_loss(
    model: DitModel,
    vae: MaskVae,
    grounder: GrounderModel,
    dataset: SampleDataset,
    sched: NoiseSchedule,
    seed: int,
    batch_size: int = 64,
    use_mean_latent: bool = False,
) -> float:
    """Mean diffusion loss over a split with a fixed noise stream."""
    generator = torch_generator(seed)
    device = next(model.parameters()).device
    total, count = 0.0, 0
    for batch in dataset.batches(batch_size):
        loss = generator_train_step(model, vae, grounder, batch.to(device), sched, generator, use_mean_latent)
        total += float(loss) * len(batch)
        count += len(batch)
    return total / max(count, 1)


class GeneratorStage(StageService):
    """Stage 2: train the DiT on frozen-grounder conditions and frozen-VAE latents."""

    @property
    def stage_name(self) -> str:
        return "train-generator"

    @property
    def component(self) -> str:
        return "prompt_generator"

    def run(self) -> StageReport:
        upstream = self.upstream_digests(self.component)
        train = self.load_split("train")
        val = self.load_split("val")

        grounder = build_grounder(self.cfg)
        self.load_component("grounder", grounder)
        vae = build_vae(self.cfg)
        self.load_component("mask_vae", vae)
        sched = build_schedule(self.cfg)
        use_mean = self.cfg.diffusion.use_mean_latent

        self.seed_torch()
        model = build_dit(self.cfg).to(self.device)
        model.train()
        losses = self.fit(
            model.parameters(),
            train,
            self.cfg.stage2,
            lambda batch, generator, epoch: generator_train_step(
                model, vae, grounder, batch.to(self.device), sched, generator, use_mean
            ),
        )
        model.eval()

        metrics = {}
        if len(val):
            metrics["val_diffusion_loss"] = heldout_diffusion_loss(
                model, vae, grounder, val, sched, self.seed("val"), self.cfg.eval_batch_size, use_mean
            )
        self.logger.info("Prompt generator trained", extra={"stage": self.stage_name, **metrics})
        digest = self.save(
            model,
            upstream,
            metadata={
                "schedule_digest": sched.digest(),
                "conditioning": self.cfg.dit.conditioning,
                "grounder_digest": upstream["grounder"],
            },
        )
        report = StageReport(
            stage=self.stage_name,
            epochs=self.cfg.stage2.epochs,
            epoch_losses=losses,
            metrics=metrics,
            config_hash=self.cfg.config_hash(),
            digest=digest,
            upstream=upstream,
        )
        self.write_report(self.stage_name, report)
        return report
