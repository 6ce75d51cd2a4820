"""
Two-tower grounding model with deep-prompt injection points.

This module provides:
- Vision and language transformer towers of equal depth
- Per-layer prompt concatenation with prompt outputs discarded
- A late-fusion anchor head scoring anchors against the pooled caption

Python 3.13 Compatible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import torch
import torch.nn as nn
from timm.layers import PatchEmbed

from diffprompt.core.exceptions import ConfigurationError, ShapeMismatchError
from diffprompt.models.layers import Block
from diffprompt.schemas.config import GrounderConfig

if TYPE_CHECKING:
    from diffprompt.models.prompting import PromptSet


@dataclass
class GrounderFeatures:
    """Final-layer token features of both towers."""

    vis: torch.Tensor           # B×N_v×width
    txt: torch.Tensor           # B×L×width
    txt_pad_mask: torch.Tensor  # B×L, True at PAD

    def tensors(self) -> tuple[torch.Tensor, ...]:
        return self.vis, self.txt, self.txt_pad_mask.to(torch.uint8)

    def detach(self) -> "GrounderFeatures":
        return GrounderFeatures(self.vis.detach(), self.txt.detach(), self.txt_pad_mask)


@dataclass
class HeadOutput:
    """Raw head outputs: one logit and four box offsets per anchor."""

    logits: torch.Tensor   # B×A
    offsets: torch.Tensor  # B×A×4


def build_anchors(image_size: int, patch_size: int, scales: tuple[float, ...]) -> torch.Tensor:
    """
    Square anchors (x_min, y_min, x_max, y_max), one per vision token and scale.

    Anchor ``i`` belongs to token ``i // len(scales)`` (row-major) and scale
    ``i % len(scales)``.
    """
    grid = image_size // patch_size
    centres = (torch.arange(grid, dtype=torch.float32) + 0.5) * patch_size
    cy, cx = torch.meshgrid(centres, centres, indexing="ij")
    cx = cx.reshape(-1, 1).expand(-1, len(scales))
    cy = cy.reshape(-1, 1).expand(-1, len(scales))
    half = torch.tensor(scales, dtype=torch.float32)[None, :] / 2
    anchors = torch.stack([cx - half, cy - half, cx + half, cy + half], dim=-1)
    return anchors.reshape(-1, 4)


class DetectionHead(nn.Module):
    """Bias-free late-fusion head; zero features give logit 0 and zero offsets."""

    def __init__(self, width: int, num_scales: int) -> None:
        super().__init__()
        self.width = width
        self.num_scales = num_scales
        self.anchor_proj = nn.Linear(width, num_scales * width, bias=False)
        self.text_proj = nn.Linear(width, width, bias=False)
        self.box_reg = nn.Linear(width, num_scales * 4, bias=False)

    def forward(self, features: GrounderFeatures) -> HeadOutput:
        B, N, W = features.vis.shape
        keep = (~features.txt_pad_mask).to(features.txt.dtype).unsqueeze(-1)
        pooled = (features.txt * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        text = self.text_proj(pooled)
        anchors = self.anchor_proj(features.vis).reshape(B, N * self.num_scales, W)
        logits = (anchors @ text.unsqueeze(-1)).squeeze(-1) / math.sqrt(W)
        offsets = self.box_reg(features.vis).reshape(B, N * self.num_scales, 4)
        return HeadOutput(logits=logits, offsets=offsets)


class GrounderModel(nn.Module):
    """
    Vision tower (patch embed + N_l blocks) and language tower (token embed +
    N_l blocks) feeding an anchor head.
    """

    def __init__(
        self,
        cfg: GrounderConfig,
        image_size: int,
        vocab_size: int,
        caption_len: int,
        pad_id: int = 0,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.image_size = image_size
        self.caption_len = caption_len
        self.pad_id = pad_id
        self.width = cfg.width
        self.depth = cfg.depth
        self.num_tokens = (image_size // cfg.patch_size) ** 2

        self.patch_embed = PatchEmbed(
            img_size=image_size, patch_size=cfg.patch_size, in_chans=3, embed_dim=cfg.width
        )
        self.vis_pos = nn.Parameter(torch.zeros(1, self.num_tokens, cfg.width))
        self.tok_embed = nn.Embedding(vocab_size, cfg.width)
        self.txt_pos = nn.Parameter(torch.zeros(1, caption_len, cfg.width))
        self.vision_layers = nn.ModuleList(
            Block(cfg.width, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.language_layers = nn.ModuleList(
            Block(cfg.width, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.vis_norm = nn.LayerNorm(cfg.width, eps=1e-6)
        self.txt_norm = nn.LayerNorm(cfg.width, eps=1e-6)
        self.head = DetectionHead(cfg.width, len(cfg.anchor_scales))
        self.register_buffer(
            "anchors",
            build_anchors(image_size, cfg.patch_size, tuple(cfg.anchor_scales)),
            persistent=False,
        )
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.trunc_normal_(self.vis_pos, std=0.02)
        nn.init.trunc_normal_(self.txt_pos, std=0.02)
        nn.init.normal_(self.tok_embed.weight, std=0.02)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    @property
    def num_anchors(self) -> int:
        return self.anchors.shape[0]

    def embed(self, images: torch.Tensor, captions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Layer-0 token embeddings (E_0, L_0) and the caption padding mask."""
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, self.image_size, self.image_size):
            raise ShapeMismatchError("images", f"B×3×{self.image_size}×{self.image_size}", tuple(images.shape))
        if captions.dim() != 2 or captions.shape[1] != self.caption_len:
            raise ShapeMismatchError("captions", f"B×{self.caption_len}", tuple(captions.shape))
        vis = self.patch_embed(images) + self.vis_pos
        txt = self.tok_embed(captions) + self.txt_pos
        return vis, txt, captions == self.pad_id

    def encode(
        self,
        images: torch.Tensor,
        captions: torch.Tensor,
        prompts: Optional["PromptSet"] = None,
    ) -> GrounderFeatures:
        """
        Run both towers, injecting prompts into the first D layers.

        Layer j < D sees [prompts_j, tokens]; prompt outputs are dropped so
        every layer passes on exactly the input tokens. Without prompts (or
        with an empty PromptSet) this is the plain forward.

        Raises:
            ConfigurationError: If D exceeds the tower depth
            ShapeMismatchError: If a prompt width differs from the tower width
        """
        vis, txt, pad_mask = self.embed(images, captions)
        depth = prompts.depth if prompts is not None else 0
        if depth > self.depth:
            raise ConfigurationError(
                f"Prompt depth {depth} exceeds grounder depth {self.depth}", field="prompt.depth", value=depth
            )

        for j, layer in enumerate(self.vision_layers):
            p = prompts.visual_tokens(j) if j < depth else None
            if p is not None:
                p = self._checked(p, vis.shape[0], "visual prompts")
                vis = layer(torch.cat([p, vis], dim=1))[:, p.shape[1]:]
            else:
                vis = layer(vis)

        for j, layer in enumerate(self.language_layers):
            p = prompts.textual_tokens(j) if j < depth else None
            if p is not None:
                p = self._checked(p, txt.shape[0], "textual prompts")
                mask = torch.cat([pad_mask.new_zeros(pad_mask.shape[0], p.shape[1]), pad_mask], dim=1)
                txt = layer(torch.cat([p, txt], dim=1), mask)[:, p.shape[1]:]
            else:
                txt = layer(txt, pad_mask)

        return GrounderFeatures(self.vis_norm(vis), self.txt_norm(txt), pad_mask)

    def _checked(self, tokens: torch.Tensor, batch: int, what: str) -> torch.Tensor:
        if tokens.dim() != 3 or tokens.shape[0] != batch or tokens.shape[2] != self.width:
            raise ShapeMismatchError(what, f"{batch}×n×{self.width}", tuple(tokens.shape))
        return tokens

    def forward(
        self,
        images: torch.Tensor,
        captions: torch.Tensor,
        prompts: Optional["PromptSet"] = None,
    ) -> HeadOutput:
        return self.head(self.encode(images, captions, prompts))
