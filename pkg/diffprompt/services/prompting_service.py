"""
Stage-3 prompt generation and tuning.

This module provides:
- Trajectory step assignment (reverse / sequential)
- Saliency decoding and prompt assembly
- The prompted bundle, its detector and the stage-3 training step
- Prompt-group ablation and learnable-prompt baselines
- Saliency dumps as 8-bit PGM files

Python 3.13 Compatible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional

import numpy as np
import torch
from PIL import Image

from diffprompt.core.exceptions import ConfigurationError, OutOfRangeError
from diffprompt.core.seeding import SeedPart, derive_seed
from diffprompt.models.dit import DitModel
from diffprompt.models.grounder import GrounderModel, HeadOutput
from diffprompt.models.mask_vae import MaskVae
from diffprompt.models.prompting import GlobalPromptBaseline, PromptSet, PromptTuner
from diffprompt.schemas.config import RunConfig, StageConfig
from diffprompt.schemas.report import EvalReport, StageReport
from diffprompt.services.base_service import StageService, fit
from diffprompt.services.checkpoint_service import assert_frozen
from diffprompt.services.data_service import SampleBatch, SampleDataset
from diffprompt.services.diffusion_service import LatentTrajectory, NoiseSchedule
from diffprompt.services.eval_service import DetectionList, evaluate
from diffprompt.services.generator_service import build_dit, build_schedule, grounder_features, sample_trajectory
from diffprompt.services.grounder_service import build_grounder, detect, grounder_loss
from diffprompt.services.vae_service import build_vae

logger = logging.getLogger(__name__)

Strategy = Literal["reverse", "sequential"]

# Learnable-prompt baselines: (visual, textual) modalities.
BASELINES: dict[str, tuple[bool, bool]] = {
    "visual": (True, False),
    "textual": (False, True),
    "both": (True, True),
}
BASELINE_TOKENS = 8


# ============================================================
# Step assignment
# ============================================================

@dataclass(frozen=True)
class StepAssignment:
    """Trajectory index used for each prompted layer."""

    strategy: Strategy
    steps: tuple[int, ...]

    @property
    def depth(self) -> int:
        return len(self.steps)


def select_steps(strategy: Strategy, depth: int, T_sample: int) -> StepAssignment:
    """
    Assign trajectory steps to layers.

    Reverse gives layer i the step T_sample - 2i, so shallow layers see the
    most-denoised latents; sequential uses the same steps in ascending order.

    Raises:
        ConfigurationError: If the strategy is unknown or T_sample - 2(D - 1) < 0
    """
    if strategy not in ("reverse", "sequential"):
        raise ConfigurationError(f"Unknown step strategy {strategy!r}", field="prompt.strategy", value=strategy)
    if depth < 0:
        raise ConfigurationError("Prompt depth must be non-negative", field="prompt.depth", value=depth)
    if depth and T_sample - 2 * (depth - 1) < 0:
        raise ConfigurationError(
            f"Prompt depth {depth} needs at least {2 * (depth - 1)} sampling steps",
            field="prompt.depth",
            value=depth,
            details={"T_sample": T_sample},
        )
    steps = tuple(T_sample - 2 * i for i in range(depth))
    if strategy == "sequential":
        steps = tuple(sorted(steps))
    return StepAssignment(strategy=strategy, steps=steps)


# ============================================================
# Prompt assembly
# ============================================================

@torch.no_grad()
def decode_saliencies(traj: LatentTrajectory, assignment: StepAssignment, vae: MaskVae) -> list[torch.Tensor]:
    """
    One decoded saliency batch (B×1×H×W in (0, 1)) per assigned step.

    Raises:
        FreezeViolationError: If the VAE is not frozen
        OutOfRangeError: If a step lies outside the trajectory
    """
    assert_frozen(vae, "mask_vae")
    return [vae.decode(traj.at(s)) for s in assignment.steps]


def make_prompts(
    traj: LatentTrajectory,
    assignment: StepAssignment,
    vae: MaskVae,
    tuner: PromptTuner,
) -> PromptSet:
    """
    Input-specific prompts from decoded trajectory latents plus global prompts.

    Both modality adapters of layer j read the same saliency map.

    Raises:
        OutOfRangeError: If the assignment depth differs from the tuner depth
    """
    if assignment.depth != tuner.depth:
        raise OutOfRangeError("assigned steps", assignment.depth, f"exactly {tuner.depth}")
    return tuner.assemble(decode_saliencies(traj, assignment, vae), assignment.steps)


def row_seeds(sample_ids: Iterable[int], tag: SeedPart) -> list[int]:
    """DDIM seed of every row: derived from (sample_id, tag)."""
    return [derive_seed(sample_id, tag) for sample_id in sample_ids]


@dataclass
class PromptedBundle:
    """Frozen grounder, VAE and generator plus the trainable prompt tuner."""

    grounder: GrounderModel
    vae: MaskVae
    generator: DitModel
    tuner: PromptTuner
    sched: NoiseSchedule
    assignment: StepAssignment
    T_sample: int
    digests: dict[str, str] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return self.tuner.depth

    def check_frozen(self) -> None:
        assert_frozen(self.grounder, "grounder")
        assert_frozen(self.vae, "mask_vae")
        assert_frozen(self.generator, "prompt_generator")

    def trajectory(self, images: torch.Tensor, captions: torch.Tensor, seeds: list[int]) -> LatentTrajectory:
        features = grounder_features(self.grounder, images, captions)
        return sample_trajectory(self.generator, features, self.sched, self.T_sample, seeds)

    def prompts(self, images: torch.Tensor, captions: torch.Tensor, seeds: list[int]) -> PromptSet:
        """Prompt set of a batch; D = 0 skips sampling entirely."""
        if self.depth == 0:
            return PromptSet.empty(images.shape[0])
        return make_prompts(self.trajectory(images, captions, seeds), self.assignment, self.vae, self.tuner)

    def head(
        self,
        images: torch.Tensor,
        captions: torch.Tensor,
        seeds: list[int],
        drop: Iterable[str] = (),
    ) -> HeadOutput:
        prompts = self.prompts(images, captions, seeds)
        drop = tuple(drop)
        if drop:
            prompts = prompts.zeroed(drop)
        return self.grounder(images, captions, prompts)


def build_tuner(cfg: RunConfig, depth: Optional[int] = None) -> PromptTuner:
    prompt = cfg.prompt
    return PromptTuner(
        depth=prompt.depth if depth is None else depth,
        n_prompts=prompt.n_prompts,
        n_global=prompt.n_global,
        vis_width=cfg.grounder.width,
        txt_width=cfg.grounder.width,
        channels=tuple(prompt.adapter_channels),
        pool=prompt.adapter_pool,
        per_layer=prompt.per_layer_adapters,
    )


# ============================================================
# Detection and tuning
# ============================================================

class DiffPromptDetector:
    """Prompted detector; DDIM seeds come from (sample_id, "eval")."""

    def __init__(self, bundle: PromptedBundle, drop: Iterable[str] = ()) -> None:
        self.bundle = bundle
        self.drop = tuple(drop)

    @torch.no_grad()
    def detect_batch(self, batch: SampleBatch) -> list[DetectionList]:
        device = next(self.bundle.grounder.parameters()).device
        batch = batch.to(device)
        prompts = self.bundle.prompts(batch.images, batch.captions, row_seeds(batch.sample_ids, "eval"))
        if self.drop:
            prompts = prompts.zeroed(self.drop)
        grounder = self.bundle.grounder
        return detect(grounder, grounder.encode(batch.images, batch.captions, prompts))


def prompt_tune_step(bundle: PromptedBundle, batch: SampleBatch, epoch: int) -> torch.Tensor:
    """
    Grounding loss of one batch through the full prompted pipeline.

    DDIM seeds come from (sample_id, epoch).

    Raises:
        FreezeViolationError: If any non-prompt component is trainable or holds gradients
    """
    bundle.check_frozen()
    out = bundle.head(batch.images, batch.captions, row_seeds(batch.sample_ids, epoch))
    grounder = bundle.grounder
    return grounder_loss(out, batch.boxes, grounder.anchors, grounder.cfg)


def tune_prompts(
    bundle: PromptedBundle,
    dataset: SampleDataset,
    stage: StageConfig,
    seed: int,
    on_epoch=None,
) -> list[float]:
    """Train the tuner of ``bundle`` in place; every other component stays frozen."""
    if bundle.depth == 0:
        logger.info("Prompt depth is 0; nothing to tune")
        return []
    device = next(bundle.grounder.parameters()).device
    bundle.tuner.train()
    losses = fit(
        bundle.tuner.parameters(),
        dataset,
        stage,
        seed,
        lambda batch, generator, epoch: prompt_tune_step(bundle, batch.to(device), epoch),
        "tune-prompts",
        on_epoch,
    )
    bundle.tuner.eval()
    return losses


def ablate_prompts(
    bundle: PromptedBundle,
    dataset: SampleDataset,
    cfg: RunConfig,
    drop: Iterable[str] = (),
) -> EvalReport:
    """Evaluate with the named prompt groups replaced by zero tokens."""
    drop = tuple(drop)
    label = "w/o " + "+".join(drop) if drop else "diff-prompt"
    return evaluate(DiffPromptDetector(bundle, drop), dataset, cfg, label=label, digests=bundle.digests)


# ============================================================
# Learnable-prompt baselines
# ============================================================

def build_baseline(cfg: RunConfig, kind: str) -> GlobalPromptBaseline:
    """
    Raises:
        ConfigurationError: On an unknown baseline kind
    """
    if kind not in BASELINES:
        raise ConfigurationError(f"Unknown prompt baseline {kind!r}", field="baseline", value=kind)
    visual, textual = BASELINES[kind]
    return GlobalPromptBaseline(
        depth=min(cfg.prompt.depth, cfg.grounder.depth) or 1,
        n_tokens=BASELINE_TOKENS,
        vis_width=cfg.grounder.width,
        txt_width=cfg.grounder.width,
        visual=visual,
        textual=textual,
    )


class PromptBaselineDetector:
    """Frozen grounder with learnable global prompts only."""

    def __init__(self, grounder: GrounderModel, baseline: GlobalPromptBaseline) -> None:
        self.grounder = grounder
        self.baseline = baseline

    @torch.no_grad()
    def detect_batch(self, batch: SampleBatch) -> list[DetectionList]:
        device = next(self.grounder.parameters()).device
        batch = batch.to(device)
        prompts = self.baseline.assemble(len(batch))
        return detect(self.grounder, self.grounder.encode(batch.images, batch.captions, prompts))


def train_prompt_baseline(
    grounder: GrounderModel,
    baseline: GlobalPromptBaseline,
    dataset: SampleDataset,
    stage: StageConfig,
    seed: int,
) -> list[float]:
    """Tune a learnable-prompt baseline against the frozen grounder."""
    assert_frozen(grounder, "grounder")
    device = next(grounder.parameters()).device
    baseline.to(device).train()

    def loss_fn(batch: SampleBatch, generator: torch.Generator, epoch: int) -> torch.Tensor:
        batch = batch.to(device)
        out = grounder(batch.images, batch.captions, baseline.assemble(len(batch)))
        return grounder_loss(out, batch.boxes, grounder.anchors, grounder.cfg)

    losses = fit(baseline.parameters(), dataset, stage, seed, loss_fn, "prompt-baseline")
    baseline.eval()
    return losses


# ============================================================
# Saliency dumps
# ============================================================

@torch.no_grad()
def dump_saliency(bundle: PromptedBundle, batch: SampleBatch, directory: Path) -> list[Path]:
    """
    Write every decoded saliency map of a batch as an 8-bit PGM.

    Files are named ``<sample_id>_layer<j>_step<s>.pgm``.
    """
    if bundle.depth == 0:
        return []
    device = next(bundle.grounder.parameters()).device
    batch = batch.to(device)
    directory.mkdir(parents=True, exist_ok=True)
    traj = bundle.trajectory(batch.images, batch.captions, row_seeds(batch.sample_ids, "eval"))
    saliencies = decode_saliencies(traj, bundle.assignment, bundle.vae)
    written = []
    for layer, (step, saliency) in enumerate(zip(bundle.assignment.steps, saliencies)):
        pixels = (saliency[:, 0] * 255.0).round().clamp(0, 255).to(torch.uint8).cpu().numpy()
        for row, sample_id in enumerate(batch.sample_ids):
            path = directory / f"{sample_id}_layer{layer:02d}_step{step:02d}.pgm"
            Image.fromarray(np.ascontiguousarray(pixels[row])).save(path)
            written.append(path)
    logger.info(f"Wrote {len(written)} saliency maps", extra={"directory": str(directory)})
    return written


# ============================================================
# Stage
# ============================================================

class TunerStage(StageService):
    """Stage 3: tune adapters and global prompts against the frozen bundle."""

    @property
    def stage_name(self) -> str:
        return "tune-prompts"

    @property
    def component(self) -> str:
        return "prompt_adapters"

    def load_bundle(self, cfg: Optional[RunConfig] = None, tuner: Optional[PromptTuner] = None) -> PromptedBundle:
        """
        Load the frozen components and attach a tuner (freshly built unless given).

        Raises:
            MissingDependencyError: If an upstream checkpoint is missing
            ProvenanceError: If an upstream checkpoint does not match the config
        """
        cfg = cfg or self.cfg
        grounder = build_grounder(cfg)
        vae = build_vae(cfg)
        generator = build_dit(cfg)
        digests = {
            "grounder": self.load_component("grounder", grounder),
            "mask_vae": self.load_component("mask_vae", vae),
            "prompt_generator": self.load_component("prompt_generator", generator),
        }
        if tuner is None:
            self.seed_torch(cfg.prompt.depth, cfg.prompt.strategy)
            tuner = build_tuner(cfg)
        return PromptedBundle(
            grounder=grounder,
            vae=vae,
            generator=generator,
            tuner=tuner.to(self.device),
            sched=build_schedule(cfg),
            assignment=select_steps(cfg.prompt.strategy, cfg.prompt.depth, cfg.diffusion.T_sample),
            T_sample=cfg.diffusion.T_sample,
            digests=digests,
        )

    def train(self, cfg: Optional[RunConfig] = None) -> tuple[PromptedBundle, list[float], Optional[EvalReport]]:
        """Tune a fresh tuner under ``cfg`` and evaluate it on the validation split."""
        cfg = cfg or self.cfg
        train = self.load_split("train")
        val = self.load_split("val")
        bundle = self.load_bundle(cfg)
        losses = tune_prompts(bundle, train, cfg.stage3, self.seed("train"), self.log_epoch)
        report = None
        if len(val):
            report = evaluate(DiffPromptDetector(bundle), val, cfg, label="diff-prompt", digests=bundle.digests)
        return bundle, losses, report

    def run(self) -> StageReport:
        upstream = self.upstream_digests(self.component)
        bundle, losses, report = self.train()
        metrics = {}
        if report is not None:
            metrics = {"val_r1": report.r1, "val_r5": report.r5, "val_ub": report.upper_bound}
        self.logger.info("Prompt adapters tuned", extra={"stage": self.stage_name, **metrics})
        digest = self.save(
            bundle.tuner,
            upstream,
            metadata={
                "strategy": bundle.assignment.strategy,
                "steps": list(bundle.assignment.steps),
                "generator_digest": upstream["prompt_generator"],
            },
        )
        stage_report = StageReport(
            stage=self.stage_name,
            epochs=self.cfg.stage3.epochs,
            epoch_losses=losses,
            metrics=metrics,
            evaluation=report,
            config_hash=self.cfg.config_hash(),
            digest=digest,
            upstream=upstream,
        )
        self.write_report(self.stage_name, stage_report)
        return stage_report
