"""Manifests of on-disk artifacts: checkpoints and dataset files."""

from __future__ import annotations

from math import prod
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

CHECKPOINT_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1


class TensorEntry(BaseModel):
    """One tensor of a checkpoint blob."""

    model_config = ConfigDict(frozen=True)

    name: str
    shape: list[int]
    dtype: Literal["float32"] = "float32"

    @property
    def numel(self) -> int:
        return prod(self.shape)


class CheckpointManifest(BaseModel):
    """
    JSON header of a single-file checkpoint.

    Tensors are stored little-endian f32 after the manifest, concatenated in
    ``tensors`` order.
    """

    model_config = ConfigDict(frozen=True)

    format_version: int = CHECKPOINT_FORMAT_VERSION
    component: str
    tensors: list[TensorEntry]
    config_hash: str = Field(description="Hash of the config sections defining this component")
    run_config_hash: str = Field(default="", description="Hash of the whole RunConfig at write time")
    upstream: dict[str, str] = Field(default_factory=dict, description="Upstream component -> digest")
    metadata: dict[str, Any] = Field(default_factory=dict)

    @property
    def blob_bytes(self) -> int:
        return 4 * sum(entry.numel for entry in self.tensors)


class DatasetManifest(BaseModel):
    """Sidecar JSON written next to every dataset file."""

    model_config = ConfigDict(frozen=True)

    format_version: int = DATASET_FORMAT_VERSION
    split: str
    count: int
    image_size: int
    caption_len: int
    id_range: tuple[int, int] = Field(description="Half-open sample-id range")
    splits: dict[str, tuple[int, int]] = Field(default_factory=dict, description="All split boundaries of the corpus")
    corpus: dict[str, Any] = Field(default_factory=dict)
    config_hash: str = ""
    digest: str = Field(default="", description="SHA-256 of the dataset file")
