"""Run configuration schemas: corpus, model dimensions, stages, seeds."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, ClassVar, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from diffprompt.core.config import settings
from diffprompt.core.exceptions import ConfigurationError

# Named colors available to the scene renderer (RGB in [0, 1]).
COLOR_TABLE: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.20, 0.80),
    "orange": (0.98, 0.55, 0.05),
    "white": (0.95, 0.95, 0.95),
    "cyan": (0.10, 0.85, 0.90),
}

SHAPE_KINDS = ("circle", "square", "triangle")
SIZE_WORDS = ("small", "big")
HALF_RELATIONS = ("left", "right", "top", "bottom")
EXTREME_RELATIONS = ("leftmost", "rightmost")
RELATIONS = HALF_RELATIONS + EXTREME_RELATIONS

PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"

# VAE spatial compression; fixed by the latent shape contract.
VAE_DOWNSAMPLE = 8
LATENT_CHANNELS = 4


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Vocab:
    """Fixed token table: PAD, EOS, article, sizes, colors, shapes, relations."""

    def __init__(self, colors: list[str], kinds: list[str]) -> None:
        self.words: list[str] = [
            PAD_TOKEN, EOS_TOKEN, "the",
            *SIZE_WORDS, *colors, *kinds, *RELATIONS,
        ]
        self._ids = {word: i for i, word in enumerate(self.words)}
        if len(self._ids) != len(self.words):
            raise ConfigurationError("Vocabulary words must be unique", field="palette")

    @property
    def pad_id(self) -> int:
        return self._ids[PAD_TOKEN]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS_TOKEN]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def encode(self, words: list[str], length: int) -> list[int]:
        """Encode words, append EOS and right-pad with PAD to ``length``."""
        ids = [self._ids[w] for w in words] + [self.eos_id]
        if len(ids) > length:
            raise ConfigurationError(
                f"Caption of {len(ids)} tokens exceeds caption_len={length}",
                field="caption_len",
                value=length,
            )
        return ids + [self.pad_id] * (length - len(ids))

    def decode(self, ids: list[int]) -> list[str]:
        """Decode token ids up to the first EOS, dropping padding."""
        words = []
        for token in ids:
            if token == self.eos_id:
                break
            if token != self.pad_id:
                words.append(self.words[token])
        return words


class SceneConfig(_Section):
    """Parameters of the synthetic referring-expression corpus."""

    image_size: int = Field(default=64, ge=16, description="Pixels per side")
    min_shapes: int = Field(default=2, ge=1)
    max_shapes: int = Field(default=4, ge=1)
    palette: list[str] = Field(
        default_factory=lambda: ["red", "green", "blue", "yellow", "purple"],
        description="Named colors; at least four",
    )
    shape_kinds: list[Literal["circle", "square", "triangle"]] = Field(
        default_factory=lambda: list(SHAPE_KINDS)
    )
    caption_len: int = Field(default=8, ge=6, description="Token slots including EOS and PAD")
    small_radius: tuple[float, float] = Field(default=(0.08, 0.12), description="Fraction of image size")
    big_radius: tuple[float, float] = Field(default=(0.17, 0.22), description="Fraction of image size")
    background: tuple[float, float, float] = (0.05, 0.05, 0.05)
    max_rejections: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def _check_invariants(self) -> "SceneConfig":
        if self.image_size % VAE_DOWNSAMPLE:
            raise ConfigurationError(
                f"image_size must be divisible by {VAE_DOWNSAMPLE}",
                field="image_size",
                value=self.image_size,
            )
        if self.min_shapes > self.max_shapes:
            raise ConfigurationError("min_shapes exceeds max_shapes", field="min_shapes")
        if len(self.palette) < 4:
            raise ConfigurationError("palette needs at least four colors", field="palette")
        unknown = [c for c in self.palette if c not in COLOR_TABLE]
        if unknown:
            raise ConfigurationError(f"Unknown colors {unknown}", field="palette")
        if len(set(self.palette)) != len(self.palette) or len(set(self.shape_kinds)) != len(self.shape_kinds):
            raise ConfigurationError("palette and shape_kinds must not repeat", field="palette")
        if self.small_radius[1] >= self.big_radius[0]:
            raise ConfigurationError("small and big radius classes must be disjoint", field="small_radius")
        return self

    def vocab(self) -> Vocab:
        return Vocab(list(self.palette), list(self.shape_kinds))


class CorpusConfig(_Section):
    """Scene parameters plus split sizes; splits are contiguous sample-id ranges."""

    scene: SceneConfig = Field(default_factory=SceneConfig)
    train_size: int = Field(default=8000, ge=0)
    val_size: int = Field(default=1000, ge=0)
    test_size: int = Field(default=1000, ge=0)
    id_offset: int = Field(default=0, ge=0, description="First sample id (= generation seed)")

    def split_ranges(self) -> dict[str, tuple[int, int]]:
        """Half-open sample-id range of each split."""
        start = self.id_offset
        ranges = {}
        for name, size in (("train", self.train_size), ("val", self.val_size), ("test", self.test_size)):
            ranges[name] = (start, start + size)
            start += size
        return ranges


class GrounderConfig(_Section):
    """Two-tower grounder dimensions and detection-head constants."""

    patch_size: int = Field(default=8, ge=1)
    width: int = Field(default=64, ge=4)
    depth: int = Field(default=12, ge=1, description="N_l, layers per tower")
    num_heads: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0)
    anchor_scales: tuple[float, ...] = (16.0, 28.0, 48.0)
    max_detections: int = Field(default=100, ge=1)
    nms_iou: float = Field(default=0.5, gt=0, le=1)
    positive_iou: float = Field(default=0.6, gt=0, le=1)
    negative_iou: float = Field(default=0.4, ge=0, le=1)

    @model_validator(mode="after")
    def _check_invariants(self) -> "GrounderConfig":
        if self.width % self.num_heads:
            raise ConfigurationError("width must be divisible by num_heads", field="grounder.width")
        if self.negative_iou > self.positive_iou:
            raise ConfigurationError("negative_iou exceeds positive_iou", field="grounder.negative_iou")
        return self


class VaeConfig(_Section):
    """Mask-VAE widths and KL weight."""

    channels: tuple[int, int, int] = (32, 64, 128)
    kl_weight: float = Field(default=0.0003, description="lambda of the VAE objective")

    @model_validator(mode="after")
    def _check_invariants(self) -> "VaeConfig":
        if self.kl_weight < 0:
            raise ConfigurationError("kl_weight must be non-negative", field="vae.kl_weight", value=self.kl_weight)
        return self


class DitConfig(_Section):
    """Diffusion transformer dimensions."""

    patch_size: int = Field(default=2, ge=1)
    hidden_size: int = Field(default=128, ge=8)
    depth: int = Field(default=4, ge=1)
    num_heads: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0)
    frequency_embedding_size: int = Field(default=256, ge=2)
    conditioning: Literal["in_context", "cross_attention"] = "in_context"

    @model_validator(mode="after")
    def _check_invariants(self) -> "DitConfig":
        if self.hidden_size % self.num_heads:
            raise ConfigurationError("hidden_size must be divisible by num_heads", field="dit.hidden_size")
        return self


class DiffusionConfig(_Section):
    """Noise schedule and sampler settings."""

    T_forward: int = Field(default=100, description="Forward noising steps")
    T_sample: int = Field(default=25, ge=1, description="DDIM sampling steps")
    cosine_s: float = Field(default=0.008, gt=0)
    beta_cap: float = Field(default=0.999, gt=0, le=0.999)
    use_mean_latent: bool = Field(default=False, description="Use mu instead of a sampled z as z0")

    @model_validator(mode="after")
    def _check_invariants(self) -> "DiffusionConfig":
        if self.T_forward < 2:
            raise ConfigurationError("T_forward must be at least 2", field="diffusion.T_forward", value=self.T_forward)
        if self.T_sample > self.T_forward:
            raise ConfigurationError("T_sample exceeds T_forward", field="diffusion.T_sample", value=self.T_sample)
        if self.T_forward % self.T_sample:
            raise ConfigurationError(
                "T_forward must be divisible by T_sample", field="diffusion.T_sample", value=self.T_sample
            )
        return self


class PromptConfig(_Section):
    """Deep-prompt depth, prompt counts, step strategy and adapter widths."""

    depth: int = Field(default=9, ge=0, description="D, number of prompted layers")
    n_prompts: int = Field(default=4, ge=1, description="N_p input-specific tokens per layer")
    n_global: int = Field(default=4, ge=0, description="N_gp global tokens per layer")
    strategy: Literal["reverse", "sequential"] = "reverse"
    per_layer_adapters: bool = False
    adapter_channels: tuple[int, int, int] = (8, 16, 32)
    adapter_pool: int = Field(default=2, ge=1, description="Spatial side after pooling, before the linear map")


class StageConfig(_Section):
    """Optimizer and schedule of one training stage."""

    epochs: int = Field(ge=0)
    batch_size: int = Field(ge=1)
    lr: float = Field(gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    optimizer: Literal["adamw"] = "adamw"
    grad_clip: Optional[float] = Field(default=1.0, gt=0)


class RunConfig(BaseModel):
    """Full experiment configuration shared by every CLI command."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(default=0, ge=0, lt=1 << 64)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    grounder: GrounderConfig = Field(default_factory=GrounderConfig)
    vae: VaeConfig = Field(default_factory=VaeConfig)
    dit: DitConfig = Field(default_factory=DitConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    prompt: PromptConfig = Field(default_factory=PromptConfig)
    stage0: StageConfig = Field(default_factory=lambda: StageConfig(epochs=20, batch_size=64, lr=3e-4))
    stage1: StageConfig = Field(default_factory=lambda: StageConfig(epochs=40, batch_size=128, lr=1e-3))
    stage2: StageConfig = Field(default_factory=lambda: StageConfig(epochs=60, batch_size=64, lr=3e-4))
    stage3: StageConfig = Field(default_factory=lambda: StageConfig(epochs=20, batch_size=64, lr=1e-4))
    eval_batch_size: int = Field(default=64, ge=1)
    out_dir: str = Field(default_factory=lambda: settings.OUT_DIR)
    device: str = Field(default_factory=lambda: settings.DEVICE)

    # Fields that locate a run rather than define it.
    UNHASHED_FIELDS: ClassVar[frozenset[str]] = frozenset({"out_dir", "device"})

    @model_validator(mode="after")
    def _check_cross_section(self) -> "RunConfig":
        size = self.corpus.scene.image_size
        if size % self.grounder.patch_size:
            raise ConfigurationError(
                "image_size must be divisible by the grounder patch size",
                field="grounder.patch_size",
                value=self.grounder.patch_size,
            )
        if (size // VAE_DOWNSAMPLE) % self.dit.patch_size:
            raise ConfigurationError(
                "latent side must be divisible by the DiT patch size",
                field="dit.patch_size",
                value=self.dit.patch_size,
            )
        if self.prompt.depth > self.grounder.depth:
            raise ConfigurationError(
                "prompt depth exceeds grounder depth", field="prompt.depth", value=self.prompt.depth
            )
        if self.diffusion.T_sample - 2 * (self.prompt.depth - 1) < 0:
            raise ConfigurationError(
                "prompt depth too large for T_sample under the step rule",
                field="prompt.depth",
                value=self.prompt.depth,
            )
        return self

    # ========================================================
    # Hashing
    # ========================================================

    def section_hash(self, *names: str) -> str:
        """SHA-256 over the canonical JSON of the named sections."""
        payload = {name: self._dump(getattr(self, name)) for name in sorted(names)}
        return _sha256_json(payload)

    def config_hash(self) -> str:
        """SHA-256 over every defining field (paths and device excluded)."""
        payload = self.model_dump(mode="json", exclude=set(self.UNHASHED_FIELDS))
        return _sha256_json(payload)

    @staticmethod
    def _dump(value: Any) -> Any:
        return value.model_dump(mode="json") if isinstance(value, BaseModel) else value

    # ========================================================
    # Loading
    # ========================================================

    @classmethod
    def load(cls, path: Optional[str | Path] = None, **overrides: Any) -> "RunConfig":
        """
        Load a RunConfig from UTF-8 JSON and apply top-level overrides.

        Args:
            path: JSON file, or None for defaults
            overrides: Top-level fields (seed, out_dir, device); None values are ignored

        Raises:
            ConfigurationError: If the file is unreadable or the schema rejects it
        """
        data: dict[str, Any] = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigurationError(f"Cannot read config file: {e}", field="--config", value=str(path))
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.parse_dict(data)

    @classmethod
    def parse_dict(cls, data: dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError(
                "Run configuration failed validation",
                details={"errors": json.loads(e.json(include_url=False))},
            )

    def updated(self, **changes: Any) -> "RunConfig":
        """
        Return a validated copy with nested changes, e.g. ``prompt={"depth": 3}``.
        """
        data = self.model_dump(mode="json")
        for key, value in changes.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return self.parse_dict(data)


def _sha256_json(payload: Any) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
