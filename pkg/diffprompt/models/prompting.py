"""Prompt adapters, learnable global prompts and the assembled PromptSet."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import torch
import torch.nn as nn

from diffprompt.core.exceptions import ConfigurationError, OutOfRangeError

PROMPT_GROUPS = ("P_v", "GP_v", "P_l", "GP_l")


@dataclass
class PromptSet:
    """
    Per-layer prompt tokens for both towers.

    ``visual[j]``/``textual[j]`` are input-specific tokens (B×N_p×width);
    ``global_visual[j]``/``global_textual[j]`` are shared tokens (N_gp×width).
    A modality may carry no group of a kind (an empty list); layer j of a
    tower then receives only the groups it has.
    """

    batch_size: int
    visual: list[torch.Tensor] = field(default_factory=list)
    textual: list[torch.Tensor] = field(default_factory=list)
    global_visual: list[torch.Tensor] = field(default_factory=list)
    global_textual: list[torch.Tensor] = field(default_factory=list)
    steps: tuple[int, ...] = ()

    @classmethod
    def empty(cls, batch_size: int = 1) -> "PromptSet":
        return cls(batch_size=batch_size)

    @property
    def depth(self) -> int:
        return max(len(self.visual), len(self.textual), len(self.global_visual), len(self.global_textual))

    def _tokens(self, specific: list[torch.Tensor], shared: list[torch.Tensor], j: int) -> Optional[torch.Tensor]:
        if not 0 <= j < self.depth:
            raise OutOfRangeError("prompt layer", j, f"[0, {self.depth})")
        parts = []
        if specific:
            parts.append(specific[j])
        if shared:
            parts.append(shared[j].unsqueeze(0).expand(self.batch_size, -1, -1))
        return torch.cat(parts, dim=1) if parts else None

    def visual_tokens(self, j: int) -> Optional[torch.Tensor]:
        """[P_v[j], GP_v[j]] as B×n×width, or None when the tower is unprompted."""
        return self._tokens(self.visual, self.global_visual, j)

    def textual_tokens(self, j: int) -> Optional[torch.Tensor]:
        """[P_l[j], GP_l[j]] as B×n×width, or None when the tower is unprompted."""
        return self._tokens(self.textual, self.global_textual, j)

    def zeroed(self, groups: Iterable[str]) -> "PromptSet":
        """
        Replace the named groups by zero tokens of identical shape.

        Raises:
            ConfigurationError: On an unknown group name
        """
        groups = set(groups)
        unknown = groups - set(PROMPT_GROUPS)
        if unknown:
            raise ConfigurationError(f"Unknown prompt groups {sorted(unknown)}", field="drop", value=sorted(unknown))

        def _zero(tensors: list[torch.Tensor], name: str) -> list[torch.Tensor]:
            return [torch.zeros_like(t) for t in tensors] if name in groups else tensors

        return replace(
            self,
            visual=_zero(self.visual, "P_v"),
            global_visual=_zero(self.global_visual, "GP_v"),
            textual=_zero(self.textual, "P_l"),
            global_textual=_zero(self.global_textual, "GP_l"),
        )


class PromptAdapter(nn.Module):
    """
    Saliency map (B×1×H×W) -> N_p prompt tokens of one modality.

    Three stride-2 convolutions, average pooling to a fixed ``pool``×``pool``
    side, then a linear map to N_p·width. Pooling comes before the flatten, so
    the linear layer holds c3·pool²·N_p·width weights whatever the saliency
    resolution; a flatten of the raw H/8×W/8 feature map would tie it to H×W.
    """

    def __init__(
        self,
        n_prompts: int,
        width: int,
        channels: tuple[int, int, int] = (8, 16, 32),
        pool: int = 2,
    ) -> None:
        super().__init__()
        c1, c2, c3 = channels
        self.n_prompts = n_prompts
        self.width = width
        self.features = nn.Sequential(
            nn.Conv2d(1, c1, kernel_size=3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c1, c2, kernel_size=3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c2, c3, kernel_size=3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(pool),
            nn.Flatten(),
        )
        self.proj = nn.Linear(c3 * pool * pool, n_prompts * width)

    def forward(self, saliency: torch.Tensor) -> torch.Tensor:
        return self.proj(self.features(saliency)).reshape(saliency.shape[0], self.n_prompts, self.width)


class GlobalPromptStore(nn.Module):
    """Learnable input-independent prompts: D×N_gp×width per modality."""

    def __init__(
        self,
        depth: int,
        n_global: int,
        vis_width: int,
        txt_width: int,
        visual: bool = True,
        textual: bool = True,
    ) -> None:
        super().__init__()
        self.depth = depth
        self.visual = nn.Parameter(torch.zeros(depth, n_global, vis_width)) if visual and n_global else None
        self.textual = nn.Parameter(torch.zeros(depth, n_global, txt_width)) if textual and n_global else None
        for param in (self.visual, self.textual):
            if param is not None:
                nn.init.normal_(param, std=0.02)

    def visual_list(self) -> list[torch.Tensor]:
        return [] if self.visual is None else list(self.visual.unbind(0))

    def textual_list(self) -> list[torch.Tensor]:
        return [] if self.textual is None else list(self.textual.unbind(0))


class PromptTuner(nn.Module):
    """
    Every stage-3 trainable parameter: modality adapters plus global prompts.

    Adapters are shared across layers unless ``per_layer`` is set.
    """

    def __init__(
        self,
        depth: int,
        n_prompts: int,
        n_global: int,
        vis_width: int,
        txt_width: int,
        channels: tuple[int, int, int] = (8, 16, 32),
        pool: int = 2,
        per_layer: bool = False,
    ) -> None:
        super().__init__()
        self.depth = depth
        self.per_layer = per_layer
        copies = depth if per_layer else 1
        self.visual_adapters = nn.ModuleList(
            PromptAdapter(n_prompts, vis_width, channels, pool) for _ in range(copies if depth else 0)
        )
        self.textual_adapters = nn.ModuleList(
            PromptAdapter(n_prompts, txt_width, channels, pool) for _ in range(copies if depth else 0)
        )
        self.global_prompts = GlobalPromptStore(depth, n_global, vis_width, txt_width)

    def visual_adapter(self, j: int) -> PromptAdapter:
        return self.visual_adapters[j if self.per_layer else 0]

    def textual_adapter(self, j: int) -> PromptAdapter:
        return self.textual_adapters[j if self.per_layer else 0]

    def assemble(self, saliencies: list[torch.Tensor], steps: tuple[int, ...] = ()) -> PromptSet:
        """
        Build the PromptSet from one decoded saliency batch per layer.

        Raises:
            OutOfRangeError: If the number of saliency maps differs from the depth
        """
        if len(saliencies) != self.depth:
            raise OutOfRangeError("saliency maps", len(saliencies), f"exactly {self.depth}")
        batch = saliencies[0].shape[0] if saliencies else 1
        return PromptSet(
            batch_size=batch,
            visual=[self.visual_adapter(j)(s) for j, s in enumerate(saliencies)],
            textual=[self.textual_adapter(j)(s) for j, s in enumerate(saliencies)],
            global_visual=self.global_prompts.visual_list(),
            global_textual=self.global_prompts.textual_list(),
            steps=tuple(steps),
        )


class GlobalPromptBaseline(nn.Module):
    """
    Deep prompt tuning with learnable global tokens only.

    Visual-only, textual-only or both modalities.
    """

    def __init__(
        self,
        depth: int,
        n_tokens: int,
        vis_width: int,
        txt_width: int,
        visual: bool,
        textual: bool,
    ) -> None:
        super().__init__()
        if not (visual or textual):
            raise ConfigurationError("A prompt baseline needs at least one modality", field="baseline")
        self.depth = depth
        self.global_prompts = GlobalPromptStore(depth, n_tokens, vis_width, txt_width, visual=visual, textual=textual)

    def assemble(self, batch_size: int) -> PromptSet:
        return PromptSet(
            batch_size=batch_size,
            global_visual=self.global_prompts.visual_list(),
            global_textual=self.global_prompts.textual_list(),
        )

