"""Convolutional VAE compressing 1×H×W masks into 4×(H/8)×(W/8) latents."""

from __future__ import annotations

import torch
import torch.nn as nn

from diffprompt.core.exceptions import ShapeMismatchError
from diffprompt.schemas.config import LATENT_CHANNELS, VAE_DOWNSAMPLE


def _down(c_in: int, c_out: int) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)


def _up(c_in: int, c_out: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(c_in, c_out, kernel_size=3, stride=2, padding=1, output_padding=1)


class MaskVae(nn.Module):
    """
    Mask VAE with three stride-2 stages per side.

    The encoder predicts mean and log-variance; the decoder ends in a sigmoid
    so reconstructions lie in (0, 1). Neither direction draws random numbers.
    """

    def __init__(
        self,
        channels: tuple[int, int, int] = (32, 64, 128),
        latent_channels: int = LATENT_CHANNELS,
    ) -> None:
        super().__init__()
        c1, c2, c3 = channels
        c0 = max(1, c1 // 2)
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            _down(1, c1), nn.SiLU(),
            _down(c1, c2), nn.SiLU(),
            _down(c2, c3), nn.SiLU(),
        )
        self.mu_head = nn.Conv2d(c3, latent_channels, kernel_size=1)
        self.logvar_head = nn.Conv2d(c3, latent_channels, kernel_size=1)
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, c3, kernel_size=1), nn.SiLU(),
            _up(c3, c2), nn.SiLU(),
            _up(c2, c1), nn.SiLU(),
            _up(c1, c0), nn.SiLU(),
            nn.Conv2d(c0, 1, kernel_size=3, padding=1),
        )

    def encode(self, m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """B×1×H×W masks -> (mu, log_var), each B×4×(H/8)×(W/8)."""
        if m.dim() != 4 or m.shape[1] != 1:
            raise ShapeMismatchError("mask", "B×1×H×W", tuple(m.shape))
        if m.shape[2] % VAE_DOWNSAMPLE or m.shape[3] % VAE_DOWNSAMPLE:
            raise ShapeMismatchError("mask side", f"divisible by {VAE_DOWNSAMPLE}", tuple(m.shape[2:]))
        h = self.encoder(m)
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """B×4×h×w latents -> B×1×8h×8w reconstructions in (0, 1)."""
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ShapeMismatchError("latent", f"B×{self.latent_channels}×h×w", tuple(z.shape))
        return torch.sigmoid(self.decoder(z))

    def forward(self, m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Mean-path reconstruction: (m_tilde, mu, log_var)."""
        mu, log_var = self.encode(m)
        return self.decode(mu), mu, log_var
