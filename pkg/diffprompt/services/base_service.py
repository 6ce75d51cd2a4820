"""
Base service class for pipeline stages.

This module provides:
- Run directory layout (data, checkpoints, reports)
- Upstream checkpoint loading with dependency and provenance checks
- Seeded AdamW optimization with a divergence guard
- Checkpoint and stage-report writing

Python 3.13 Compatible.
"""

from __future__ import annotations

import json
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

import torch
import torch.nn as nn
from pydantic import BaseModel

from diffprompt.core.exceptions import MissingDependencyError, TrainingDivergenceError
from diffprompt.core.logging import LoggerMixin
from diffprompt.core.seeding import derive_seed, torch_generator
from diffprompt.schemas.config import RunConfig, StageConfig
from diffprompt.services import checkpoint_service
from diffprompt.services.data_service import SampleBatch, SampleDataset, read_manifest

logger = logging.getLogger(__name__)

# Stage that produces each artifact, for dependency errors.
PRODUCER = {
    "dataset": "gen-data",
    "grounder": "pretrain",
    "mask_vae": "train-vae",
    "prompt_generator": "train-generator",
    "prompt_adapters": "tune-prompts",
}


@dataclass(frozen=True)
class RunPaths:
    """Output layout of one run: ``<out>/data``, ``<out>/checkpoints``, ``<out>/reports``."""

    root: Path

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "RunPaths":
        return cls(Path(cfg.out_dir))

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def saliency(self) -> Path:
        return self.root / "saliency"

    def dataset(self, split: str) -> Path:
        return self.data / f"{split}.dpds"

    def checkpoint(self, component: str) -> Path:
        return self.checkpoints / f"{component}.ckpt"

    def report(self, name: str) -> Path:
        return self.reports / f"{name}.json"


LossFn = Callable[[SampleBatch, torch.Generator, int], torch.Tensor]


def fit(
    params: Iterable[nn.Parameter],
    dataset: SampleDataset,
    stage: StageConfig,
    seed: int,
    loss_fn: LossFn,
    stage_name: str = "train",
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> list[float]:
    """
    Seeded AdamW loop shared by every training stage.

    Each epoch draws its shuffle order and any noise from one generator
    derived from (seed, epoch); ``loss_fn(batch, generator, epoch)`` returns
    the batch loss.

    Args:
        params: Trainable parameters
        dataset: Training split
        stage: Epochs, batch size, learning rate, weight decay, clipping
        seed: Seed of the stage's training stream
        loss_fn: Batch loss
        stage_name: Name used in divergence errors
        on_epoch: Called with (epoch, mean loss) after each epoch

    Returns:
        Mean loss of every epoch

    Raises:
        TrainingDivergenceError: If a loss is not finite
    """
    params = [p for p in params if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=stage.lr, weight_decay=stage.weight_decay)
    epoch_losses: list[float] = []
    step = 0
    for epoch in range(stage.epochs):
        generator = torch_generator(derive_seed(seed, "epoch", epoch))
        total, count = 0.0, 0
        for batch in dataset.batches(stage.batch_size, shuffle=True, generator=generator):
            loss = loss_fn(batch, generator, epoch)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergenceError(stage_name, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if stage.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, stage.grad_clip)
            optimizer.step()
            total += value
            count += 1
            step += 1
        epoch_losses.append(total / max(count, 1))
        if on_epoch is not None:
            on_epoch(epoch, epoch_losses[-1])
    return epoch_losses


def write_report(path: Path, report: BaseModel) -> Path:
    """Write a report as UTF-8 JSON with sorted keys."""
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.loads(report.model_dump_json())
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class StageService(LoggerMixin, ABC):
    """
    Abstract base service for a pipeline stage.

    Provides:
    - Upstream artifact lookup and provenance checks
    - Deterministic optimization helpers
    - Checkpoint and report output

    Subclasses must implement:
    - stage_name property
    - component property
    - run method
    """

    @property
    @abstractmethod
    def stage_name(self) -> str:
        """Return the CLI command that runs this stage."""
        pass

    @property
    @abstractmethod
    def component(self) -> str:
        """Return the checkpoint component this stage writes."""
        pass

    def __init__(self, cfg: RunConfig, paths: Optional[RunPaths] = None):
        """
        Initialize the stage.

        Args:
            cfg: Run configuration
            paths: Output layout (defaults to ``cfg.out_dir``)
        """
        self.cfg = cfg
        self.paths = paths or RunPaths.from_config(cfg)
        self.device = torch.device(cfg.device)

    def seed(self, *names: Any) -> int:
        return derive_seed(self.cfg.seed, self.component, *names)

    def seed_torch(self, *names: Any) -> None:
        """Seed the global torch RNG (module initialization) from a named stream."""
        torch.manual_seed(self.seed("init", *names))

    # ========================================================
    # Upstream Artifacts
    # ========================================================

    def require(self, artifact: str, split: str = "train") -> Path:
        """
        Path of an upstream artifact, which must exist.

        Raises:
            MissingDependencyError: Naming the stage that produces it
        """
        path = self.paths.dataset(split) if artifact == "dataset" else self.paths.checkpoint(artifact)
        if not path.exists():
            raise MissingDependencyError(self.stage_name, PRODUCER[artifact], str(path))
        return path

    def dataset_digest(self) -> str:
        return read_manifest(self.require("dataset", "train")).digest

    def load_split(self, split: str) -> SampleDataset:
        return SampleDataset.from_file(self.require("dataset", split), name=split)

    def upstream_digests(self, component: str) -> dict[str, str]:
        """Current digests of everything ``component`` depends on."""
        digests = {}
        for name in checkpoint_service.COMPONENT_UPSTREAM[component]:
            if name == "dataset":
                digests[name] = self.dataset_digest()
            else:
                digests[name] = checkpoint_service.file_sha256(self.require(name))
        return digests

    def load_component(self, component: str, module: nn.Module, freeze: bool = True) -> str:
        """
        Load an upstream checkpoint after checking its provenance.

        Returns:
            Digest of the loaded checkpoint

        Raises:
            MissingDependencyError: If the checkpoint does not exist
            ProvenanceError: If it was produced under another config or upstream
        """
        path = self.require(component)
        manifest = checkpoint_service.read_manifest(path)
        checkpoint_service.verify_provenance(
            manifest,
            checkpoint_service.component_hash(self.cfg, component),
            self.upstream_digests(component),
        )
        checkpoint_service.load_into(module, path)
        module.to(self.device)
        if freeze:
            checkpoint_service.freeze(module)
        return checkpoint_service.file_sha256(path)

    # ========================================================
    # Optimization
    # ========================================================

    def fit(
        self,
        params: Iterable[nn.Parameter],
        dataset: SampleDataset,
        stage: StageConfig,
        loss_fn: LossFn,
    ) -> list[float]:
        return fit(params, dataset, stage, self.seed("train"), loss_fn, self.stage_name, self.log_epoch)

    def log_epoch(self, epoch: int, loss: float) -> None:
        self.logger.info(
            f"{self.stage_name} epoch {epoch + 1} loss {loss:.5f}",
            extra={"stage": self.stage_name, "epoch": epoch + 1, "loss": loss},
        )

    # ========================================================
    # Outputs
    # ========================================================

    def save(self, module: nn.Module, upstream: dict[str, str], metadata: Optional[dict[str, Any]] = None) -> str:
        return checkpoint_service.save_checkpoint(
            self.paths.checkpoint(self.component),
            self.component,
            module,
            config_hash=checkpoint_service.component_hash(self.cfg, self.component),
            upstream=upstream,
            metadata=metadata,
            run_config_hash=self.cfg.config_hash(),
        )

    def write_report(self, name: str, report: BaseModel) -> Path:
        return write_report(self.paths.report(name), report)

    @abstractmethod
    def run(self) -> BaseModel:
        """Run the stage and return its report."""
        pass
