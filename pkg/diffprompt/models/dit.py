"""
Diffusion transformer predicting mask-latent noise.

The condition (frozen-grounder visual and textual tokens, each shifted by the
timestep embedding) is concatenated with the latent patch tokens at every
block; only patch-token outputs reach the unpatchify head. A cross-attention
variant keeps the condition as keys and values instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
from timm.layers import PatchEmbed

from diffprompt.core.exceptions import ShapeMismatchError
from diffprompt.models.layers import Block, CrossBlock
from diffprompt.schemas.config import LATENT_CHANNELS, DitConfig


@dataclass
class Condition:
    """
    Condition tokens in the order [visual, textual].

    Every token already carries ``t_emb``; ``key_padding_mask`` is True at
    caption PAD positions.
    """

    tokens: torch.Tensor            # B×(N_v + L)×hidden
    key_padding_mask: torch.Tensor  # B×(N_v + L)
    t_emb: torch.Tensor             # B×hidden
    num_visual: int

    @property
    def vis_tokens(self) -> torch.Tensor:
        return self.tokens[:, :self.num_visual]

    @property
    def txt_tokens(self) -> torch.Tensor:
        return self.tokens[:, self.num_visual:]

    def tensors(self) -> tuple[torch.Tensor, ...]:
        return self.tokens, self.key_padding_mask.to(torch.uint8), self.t_emb


class TimestepEmbedder(nn.Module):
    """
    Embeds scalar timesteps into vector representations.
    """

    def __init__(self, hidden_size: int, frequency_embedding_size: int = 256) -> None:
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(frequency_embedding_size, hidden_size, bias=True),
            nn.SiLU(),
            nn.Linear(hidden_size, hidden_size, bias=True),
        )
        self.frequency_embedding_size = frequency_embedding_size

    @staticmethod
    def timestep_embedding(t: torch.Tensor, dim: int, max_period: int = 10000) -> torch.Tensor:
        half = dim // 2
        freqs = torch.exp(
            -math.log(max_period) * torch.arange(start=0, end=half, dtype=torch.float32) / half
        ).to(device=t.device)
        args = t[:, None].float() * freqs[None]
        embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        if dim % 2:
            embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
        return embedding

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t_freq = self.timestep_embedding(t, self.frequency_embedding_size)
        return self.mlp(t_freq.to(self.mlp[0].weight.dtype))


class DitModel(nn.Module):
    """
    Noise predictor over 4×h×w latents.

    Args:
        cfg: DiT dimensions and conditioning mode
        latent_size: Latent side h (= image_size / 8)
        vis_dim: Width of the grounder's visual tokens
        txt_dim: Width of the grounder's textual tokens
        num_vis_tokens: Visual condition tokens per sample
        num_txt_tokens: Textual condition tokens per sample (caption_len)
    """

    def __init__(
        self,
        cfg: DitConfig,
        latent_size: int,
        vis_dim: int,
        txt_dim: int,
        num_vis_tokens: int,
        num_txt_tokens: int,
        latent_channels: int = LATENT_CHANNELS,
    ) -> None:
        super().__init__()
        if latent_size % cfg.patch_size:
            raise ShapeMismatchError("latent side", f"divisible by {cfg.patch_size}", latent_size)
        self.cfg = cfg
        self.latent_size = latent_size
        self.latent_channels = latent_channels
        self.patch_size = cfg.patch_size
        self.hidden_size = cfg.hidden_size
        self.num_vis_tokens = num_vis_tokens
        self.num_txt_tokens = num_txt_tokens
        self.in_context = cfg.conditioning == "in_context"

        self.x_embedder = PatchEmbed(latent_size, cfg.patch_size, latent_channels, cfg.hidden_size, bias=True)
        self.num_patches = self.x_embedder.num_patches
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches, cfg.hidden_size))
        self.t_embedder = TimestepEmbedder(cfg.hidden_size, cfg.frequency_embedding_size)
        self.vis_proj = nn.Linear(vis_dim, cfg.hidden_size)
        self.txt_proj = nn.Linear(txt_dim, cfg.hidden_size)
        self.cond_pos_embed = nn.Parameter(torch.zeros(1, num_vis_tokens + num_txt_tokens, cfg.hidden_size))
        if self.in_context:
            self.blocks = nn.ModuleList(
                Block(cfg.hidden_size, cfg.num_heads, cfg.mlp_ratio, affine_norm=False) for _ in range(cfg.depth)
            )
        else:
            self.blocks = nn.ModuleList(
                CrossBlock(cfg.hidden_size, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
            )
        self.final_norm = nn.LayerNorm(cfg.hidden_size, elementwise_affine=False, eps=1e-6)
        self.final_linear = nn.Linear(cfg.hidden_size, cfg.patch_size * cfg.patch_size * latent_channels)
        self.initialize_weights()

    def initialize_weights(self) -> None:
        def _basic_init(module: nn.Module) -> None:
            if isinstance(module, nn.Linear):
                torch.nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.constant_(module.bias, 0)

        self.apply(_basic_init)

        w = self.x_embedder.proj.weight.data
        nn.init.xavier_uniform_(w.view([w.shape[0], -1]))
        nn.init.constant_(self.x_embedder.proj.bias, 0)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cond_pos_embed, std=0.02)

        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)

        # Zero-out output layer: an untrained model predicts zero noise.
        nn.init.constant_(self.final_linear.weight, 0)
        nn.init.constant_(self.final_linear.bias, 0)

    def embed_condition(
        self,
        vis: torch.Tensor,
        txt: torch.Tensor,
        txt_pad_mask: torch.Tensor,
        t: torch.Tensor,
    ) -> Condition:
        """Project both streams to the hidden width, add t_emb, concatenate [visual, textual]."""
        if vis.shape[1] != self.num_vis_tokens or txt.shape[1] != self.num_txt_tokens:
            raise ShapeMismatchError(
                "condition tokens",
                (self.num_vis_tokens, self.num_txt_tokens),
                (vis.shape[1], txt.shape[1]),
            )
        t_emb = self.t_embedder(t)
        v = self.vis_proj(vis) + t_emb[:, None]
        l = self.txt_proj(txt) + t_emb[:, None]
        mask = torch.cat([txt_pad_mask.new_zeros(vis.shape[0], vis.shape[1]), txt_pad_mask], dim=1)
        return Condition(tokens=torch.cat([v, l], dim=1), key_padding_mask=mask, t_emb=t_emb, num_visual=vis.shape[1])

    def unpatchify(self, x: torch.Tensor) -> torch.Tensor:
        """B×N×(p²·C) -> B×C×h×w."""
        c = self.latent_channels
        p = self.patch_size
        h = w = int(x.shape[1] ** 0.5)
        x = x.reshape(x.shape[0], h, w, p, p, c)
        x = torch.einsum("nhwpqc->nchpwq", x)
        return x.reshape(x.shape[0], c, h * p, w * p)

    def forward(self, z_t: torch.Tensor, cond: Condition) -> torch.Tensor:
        expected = (self.latent_channels, self.latent_size, self.latent_size)
        if z_t.dim() != 4 or tuple(z_t.shape[1:]) != expected:
            raise ShapeMismatchError("z_t", f"B×{expected}", tuple(z_t.shape))
        if cond.tokens.shape[1] != self.cond_pos_embed.shape[1]:
            raise ShapeMismatchError("condition length", self.cond_pos_embed.shape[1], cond.tokens.shape[1])

        x = self.x_embedder(z_t) + self.pos_embed
        c = cond.tokens + self.cond_pos_embed
        if self.in_context:
            n = x.shape[1]
            h = torch.cat([x, c], dim=1)
            mask = torch.cat([cond.key_padding_mask.new_zeros(x.shape[0], n), cond.key_padding_mask], dim=1)
            for block in self.blocks:
                h = block(h, mask)
            x = h[:, :n]
        else:
            for block in self.blocks:
                x = block(x, c, cond.key_padding_mask)
        return self.unpatchify(self.final_linear(self.final_norm(x)))
