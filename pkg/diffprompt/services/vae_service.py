"""Mask-VAE operations and stage-1 training."""

from __future__ import annotations

import logging

import torch
import torch.nn.functional as F

from diffprompt.core.exceptions import ConfigurationError, ShapeMismatchError
from diffprompt.core.seeding import seeded_randn
from diffprompt.models.mask_vae import MaskVae
from diffprompt.schemas.config import RunConfig
from diffprompt.schemas.report import StageReport
from diffprompt.services.base_service import StageService
from diffprompt.services.data_service import SampleDataset

logger = logging.getLogger(__name__)

# Validation reconstruction IoU a usable mask VAE is expected to reach.
VAE_IOU_TARGET = 0.90


def build_vae(cfg: RunConfig) -> MaskVae:
    return MaskVae(channels=tuple(cfg.vae.channels))


def encode(vae: MaskVae, m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Masks B×1×H×W -> (mu, log_var), each B×4×(H/8)×(W/8)."""
    return vae.encode(m)


def decode(vae: MaskVae, z: torch.Tensor) -> torch.Tensor:
    """Latents B×4×h×w -> reconstructions B×1×8h×8w in (0, 1)."""
    return vae.decode(z)


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if not (mu.shape == log_var.shape == eps.shape):
        raise ShapeMismatchError("reparameterization", tuple(mu.shape), (tuple(log_var.shape), tuple(eps.shape)))
    return mu + torch.exp(0.5 * log_var) * eps


def reparam_sample(mu: torch.Tensor, log_var: torch.Tensor, seed: int | list[int]) -> torch.Tensor:
    """
    z = mu + exp(0.5·log_var)·eps with eps drawn from ``seed``.

    Raises:
        ShapeMismatchError: If mu and log_var differ in shape
    """
    if mu.shape != log_var.shape:
        raise ShapeMismatchError("reparam_sample log_var", tuple(mu.shape), tuple(log_var.shape))
    eps = seeded_randn(tuple(mu.shape), seed, dtype=mu.dtype, device=mu.device)
    return reparameterize(mu, log_var, eps)


def kl_divergence(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Mean per-element KL(N(mu, exp(log_var)) || N(0, 1))."""
    return 0.5 * torch.mean(mu.pow(2) + log_var.exp() - 1.0 - log_var)


def vae_loss(
    m: torch.Tensor,
    m_tilde: torch.Tensor,
    mu: torch.Tensor,
    log_var: torch.Tensor,
    lam: float,
) -> torch.Tensor:
    """
    Mean squared reconstruction error plus lam times the analytic KL.

    Raises:
        ConfigurationError: If lam is negative
        ShapeMismatchError: If shapes are inconsistent
    """
    if lam < 0:
        raise ConfigurationError("KL weight must be non-negative", field="vae.kl_weight", value=lam)
    if m.shape != m_tilde.shape:
        raise ShapeMismatchError("vae_loss reconstruction", tuple(m.shape), tuple(m_tilde.shape))
    if mu.shape != log_var.shape:
        raise ShapeMismatchError("vae_loss log_var", tuple(mu.shape), tuple(log_var.shape))
    return F.mse_loss(m_tilde, m) + lam * kl_divergence(mu, log_var)


def mask_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample IoU of binary masks B×1×H×W (empty union counts as 1)."""
    pred = pred.bool().flatten(1)
    target = target.bool().flatten(1)
    inter = (pred & target).sum(dim=1).double()
    union = (pred | target).sum(dim=1).double()
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


@torch.no_grad()
def reconstruction_iou(vae: MaskVae, dataset: SampleDataset, batch_size: int = 256, threshold: float = 0.5) -> float:
    """Mean IoU of mean-path reconstructions (thresholded) against the masks."""
    device = next(vae.parameters()).device
    scores = []
    for batch in dataset.batches(batch_size):
        masks = batch.masks.to(device)
        mu, _ = vae.encode(masks)
        scores.append(mask_iou(vae.decode(mu) > threshold, masks > 0.5).cpu())
    return float(torch.cat(scores).mean()) if scores else 0.0


def vae_batch_loss(vae: MaskVae, masks: torch.Tensor, generator: torch.Generator, lam: float) -> torch.Tensor:
    """Sampled-latent VAE objective for one batch; noise drawn from ``generator``."""
    mu, log_var = vae.encode(masks)
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype).to(mu.device)
    return vae_loss(masks, vae.decode(reparameterize(mu, log_var, eps)), mu, log_var, lam)


class VaeStage(StageService):
    """Stage 1: train the mask VAE on training-split masks."""

    @property
    def stage_name(self) -> str:
        return "train-vae"

    @property
    def component(self) -> str:
        return "mask_vae"

    def run(self) -> StageReport:
        upstream = self.upstream_digests(self.component)
        train = self.load_split("train")
        val = self.load_split("val")

        self.seed_torch()
        vae = build_vae(self.cfg).to(self.device)
        vae.train()
        lam = self.cfg.vae.kl_weight
        losses = self.fit(
            vae.parameters(),
            train,
            self.cfg.stage1,
            lambda batch, generator, epoch: vae_batch_loss(vae, batch.masks.to(self.device), generator, lam),
        )
        vae.eval()

        iou = reconstruction_iou(vae, val) if len(val) else 0.0
        self.logger.info("Mask VAE trained", extra={"stage": self.stage_name, "val_reconstruction_iou": iou})
        if iou < VAE_IOU_TARGET:
            self.logger.warning(
                f"Mask VAE reconstruction IoU {iou:.3f} is below {VAE_IOU_TARGET}",
                extra={"stage": self.stage_name, "val_reconstruction_iou": iou},
            )
        digest = self.save(vae, upstream, metadata={"latent_channels": vae.latent_channels})
        report = StageReport(
            stage=self.stage_name,
            epochs=self.cfg.stage1.epochs,
            epoch_losses=losses,
            metrics={
                "val_reconstruction_iou": iou,
                "val_reconstruction_iou_target": VAE_IOU_TARGET,
                "val_reconstruction_iou_ok": float(iou >= VAE_IOU_TARGET),
            },
            config_hash=self.cfg.config_hash(),
            digest=digest,
            upstream=upstream,
        )
        self.write_report(self.stage_name, report)
        return report
