"""
Grounding metrics and complexity accounting.

This module provides:
- Box IoU, R@K and Upper Bound on ranked detection lists
- Dataset evaluation with a per-category breakdown
- Analytic parameter and FLOP accounting of a prompted bundle

Python 3.13 Compatible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Protocol, Sequence

import torch
import torch.nn as nn

from diffprompt.core.exceptions import EmptySplitError, OutOfRangeError
from diffprompt.models.layers import count_parameters
from diffprompt.schemas.config import RunConfig
from diffprompt.schemas.report import RECALL_KS, CategoryMetrics, ComplexityRow, ComplexityTable, EvalReport
from diffprompt.services.data_service import SampleBatch, SampleDataset

if TYPE_CHECKING:
    from diffprompt.models.dit import DitModel
    from diffprompt.models.grounder import GrounderModel
    from diffprompt.models.prompting import PromptTuner
    from diffprompt.services.prompting_service import PromptedBundle

logger = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5

Box = Sequence[float]


@dataclass
class DetectionList:
    """Ranked detections of one sample: boxes K×4, scores K (descending)."""

    boxes: torch.Tensor
    scores: torch.Tensor

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    @classmethod
    def empty(cls) -> "DetectionList":
        return cls(boxes=torch.zeros(0, 4), scores=torch.zeros(0))


class Detector(Protocol):
    """Anything that turns a batch into one ranked DetectionList per sample."""

    def detect_batch(self, batch: SampleBatch) -> list[DetectionList]: ...


# ============================================================
# Matching
# ============================================================

def iou(a: Box, b: Box) -> float:
    """
    Intersection over union of two (x_min, y_min, x_max, y_max) boxes.

    Disjoint boxes and pairs with zero union give 0.

    Raises:
        OutOfRangeError: If a box has max < min on either axis
    """
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    for box in ((ax1, ay1, ax2, ay2), (bx1, by1, bx2, by2)):
        if box[2] < box[0] or box[3] < box[1]:
            raise OutOfRangeError("box", box, "x_max >= x_min and y_max >= y_min")
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def first_match(boxes: Sequence[Box], gt: Box, threshold: float = IOU_THRESHOLD, limit: Optional[int] = None) -> Optional[int]:
    """Rank of the first box (within ``limit``) with IoU ≥ threshold against gt, or None."""
    if isinstance(boxes, torch.Tensor):
        boxes = boxes.tolist()
    if isinstance(gt, torch.Tensor):
        gt = gt.tolist()
    stop = len(boxes) if limit is None else min(limit, len(boxes))
    for rank in range(stop):
        if iou(boxes[rank], gt) >= threshold:
            return rank
    return None


def recall_at_k(preds: DetectionList, gt: Box, k: int, threshold: float = IOU_THRESHOLD) -> int:
    """
    1 if any of the top-min(k, |preds|) boxes matches gt, else 0.

    Raises:
        OutOfRangeError: If k < 1
    """
    if k < 1:
        raise OutOfRangeError("k", k, ">= 1")
    return int(first_match(preds.boxes, gt, threshold, limit=k) is not None)


def upper_bound(preds: DetectionList, gt: Box, threshold: float = IOU_THRESHOLD) -> int:
    """1 if any prediction in the capped list matches gt, else 0."""
    return int(first_match(preds.boxes, gt, threshold) is not None)


# ============================================================
# Dataset evaluation
# ============================================================

def target_kind(caption: torch.Tensor, cfg: RunConfig) -> str:
    """Shape kind named by an encoded caption ("unknown" if none)."""
    scene = cfg.corpus.scene
    words = scene.vocab().decode(caption.tolist())
    for word in words:
        if word in scene.shape_kinds:
            return word
    return "unknown"


def _summarize(ranks: list[Optional[int]]) -> tuple[dict[int, float], float]:
    n = len(ranks)
    r_at = {k: sum(1 for r in ranks if r is not None and r < k) / n for k in RECALL_KS}
    return r_at, sum(1 for r in ranks if r is not None) / n


def evaluate(
    detector: Detector,
    dataset: SampleDataset,
    cfg: RunConfig,
    label: str = "bundle",
    split: Optional[str] = None,
    batch_size: Optional[int] = None,
    threshold: float = IOU_THRESHOLD,
    seeds: Optional[dict[str, int]] = None,
    digests: Optional[dict[str, str]] = None,
) -> EvalReport:
    """
    Evaluate a detector on a split.

    Args:
        detector: Ranked-detection producer
        dataset: Split to evaluate
        cfg: Run configuration (vocabulary, batch size, config hash)
        label: Name of the evaluated model
        split: Split name recorded in the report
        batch_size: Evaluation batch size (defaults to ``cfg.eval_batch_size``)
        threshold: IoU match threshold
        seeds: Seeds recorded in the report
        digests: Checkpoint digests recorded in the report

    Returns:
        EvalReport with R@1/5/10, UB and a per-kind breakdown

    Raises:
        EmptySplitError: If the dataset has no samples
    """
    split = split or dataset.name
    if len(dataset) == 0:
        raise EmptySplitError(split)

    ranks: list[Optional[int]] = []
    kinds: list[str] = []
    for batch in dataset.batches(batch_size or cfg.eval_batch_size):
        detections = detector.detect_batch(batch)
        for row, preds in enumerate(detections):
            ranks.append(first_match(preds.boxes, batch.boxes[row], threshold))
            kinds.append(target_kind(batch.captions[row], cfg))

    r_at, ub = _summarize(ranks)
    per_category = {}
    for kind in sorted(set(kinds)):
        subset = [r for r, k in zip(ranks, kinds) if k == kind]
        k_r_at, k_ub = _summarize(subset)
        per_category[kind] = CategoryMetrics(n=len(subset), r_at=k_r_at, upper_bound=k_ub)

    report = EvalReport(
        label=label,
        split=split,
        n=len(ranks),
        r_at=r_at,
        upper_bound=ub,
        iou_threshold=threshold,
        per_category=per_category,
        config_hash=cfg.config_hash(),
        seeds=seeds or {},
        digests=digests or {},
    )
    logger.info(
        f"Evaluated {label} on {split}",
        extra={"label": label, "split": split, "n": report.n, "r1": report.r1, "r5": report.r5, "ub": ub},
    )
    return report


# ============================================================
# Complexity
# ============================================================

def attention_flops(n: int, d: int) -> int:
    """
    Self-attention over n tokens of width d: projections plus both n×n products.

    Counted at 2 FLOPs per multiply-accumulate: the four d×d projections give
    8·n·d² and the QKᵀ and attention-times-V products give 4·n²·d.
    """
    return 4 * n * n * d + 8 * n * d * d


def mlp_flops(n: int, d: int, hidden: int) -> int:
    return 4 * n * d * hidden


def block_flops(n: int, d: int, mlp_ratio: float) -> int:
    return attention_flops(n, d) + mlp_flops(n, d, int(d * mlp_ratio))


def sequential_flops(module: nn.Module, height: int, width: int) -> tuple[int, int, int]:
    """
    FLOPs of the convolutions and linears in a sequential stack.

    Returns:
        (flops, output height, output width)
    """
    flops = 0
    for layer in module.modules():
        if isinstance(layer, nn.ConvTranspose2d):
            k, s, p, op = layer.kernel_size[0], layer.stride[0], layer.padding[0], layer.output_padding[0]
            flops += 2 * k * k * layer.in_channels * layer.out_channels * height * width
            height = (height - 1) * s - 2 * p + k + op
            width = (width - 1) * s - 2 * p + k + op
        elif isinstance(layer, nn.Conv2d):
            k, s, p = layer.kernel_size[0], layer.stride[0], layer.padding[0]
            height = (height + 2 * p - k) // s + 1
            width = (width + 2 * p - k) // s + 1
            flops += 2 * k * k * layer.in_channels * layer.out_channels * height * width // layer.groups
        elif isinstance(layer, nn.AdaptiveAvgPool2d):
            size = layer.output_size
            height, width = (size, size) if isinstance(size, int) else size
        elif isinstance(layer, nn.Linear):
            flops += 2 * layer.in_features * layer.out_features
    return flops, height, width


def grounder_flops(model: "GrounderModel", vis_prompts: int = 0, txt_prompts: int = 0, depth: int = 0, head: bool = True) -> int:
    """Forward FLOPs of one sample with ``vis_prompts``/``txt_prompts`` tokens in the first ``depth`` layers."""
    cfg = model.cfg
    d = model.width
    n_v = model.num_tokens
    n_l = model.caption_len
    scales = len(cfg.anchor_scales)
    flops = 2 * cfg.patch_size * cfg.patch_size * 3 * d * n_v
    for j in range(model.depth):
        extra_v = vis_prompts if j < depth else 0
        extra_l = txt_prompts if j < depth else 0
        flops += block_flops(n_v + extra_v, d, cfg.mlp_ratio)
        flops += block_flops(n_l + extra_l, d, cfg.mlp_ratio)
    if head:
        flops += 2 * n_v * d * scales * d    # anchor projection
        flops += 2 * d * d                   # pooled text projection
        flops += 2 * n_v * scales * d        # anchor-text scores
        flops += 2 * n_v * d * scales * 4    # box offsets
    return flops


def generator_flops(model: "DitModel") -> int:
    """FLOPs of one noise prediction for one sample."""
    cfg = model.cfg
    d = model.hidden_size
    n = model.num_patches
    n_c = model.num_vis_tokens + model.num_txt_tokens
    flops = 2 * cfg.patch_size * cfg.patch_size * model.latent_channels * d * n
    flops += 2 * cfg.frequency_embedding_size * d + 2 * d * d
    flops += 2 * model.num_vis_tokens * model.vis_proj.in_features * d
    flops += 2 * model.num_txt_tokens * model.txt_proj.in_features * d
    hidden = int(d * cfg.mlp_ratio)
    for _ in range(cfg.depth):
        if model.in_context:
            flops += block_flops(n + n_c, d, cfg.mlp_ratio)
        else:
            flops += attention_flops(n, d)
            flops += 2 * n * d * d + 4 * n_c * d * d + 4 * n * n_c * d + 2 * n * d * d
            flops += mlp_flops(n, d, hidden)
    flops += 2 * n * d * cfg.patch_size * cfg.patch_size * model.latent_channels
    return flops


def count_params_and_flops(bundle: "PromptedBundle") -> ComplexityTable:
    """
    Exact parameter counts and analytic per-sample FLOPs of a prompted bundle.

    The prompted cost is the prompted grounder forward, the prompt-free
    condition pass, T_sample generator steps and D saliency decodes with
    both adapters.
    """
    grounder, vae, generator, tuner = bundle.grounder, bundle.vae, bundle.generator, bundle.tuner
    depth = tuner.depth
    image_size = grounder.image_size
    latent = image_size // 8
    vis_tokens, txt_tokens = prompt_token_counts(tuner)

    g_flops = grounder_flops(grounder)
    prompted_g = grounder_flops(grounder, vis_tokens, txt_tokens, depth)
    decode_flops, _, _ = sequential_flops(vae.decoder, latent, latent)
    step_flops = generator_flops(generator)
    adapter_flops = 0
    if depth:
        vis_adapter, _, _ = sequential_flops(tuner.visual_adapter(0), image_size, image_size)
        txt_adapter, _, _ = sequential_flops(tuner.textual_adapter(0), image_size, image_size)
        adapter_flops = vis_adapter + txt_adapter
    steps = bundle.T_sample if depth else 0

    prompted = prompted_g
    if depth:
        prompted += grounder_flops(grounder, head=False) + steps * step_flops + depth * (decode_flops + adapter_flops)

    rows = [
        ComplexityRow(component="grounder", total_params=count_parameters(grounder), tunable_params=0, flops=g_flops),
        ComplexityRow(component="mask_vae", total_params=count_parameters(vae), tunable_params=0, flops=decode_flops),
        ComplexityRow(
            component="prompt_generator", total_params=count_parameters(generator), tunable_params=0, flops=step_flops
        ),
        ComplexityRow(
            component="prompt_adapters",
            total_params=count_parameters(tuner),
            tunable_params=count_parameters(tuner),
            flops=adapter_flops,
        ),
    ]
    total = sum(r.total_params for r in rows)
    tunable = sum(r.tunable_params for r in rows)
    return ComplexityTable(
        rows=rows,
        bundle_params=total,
        tunable_params=tunable,
        tunable_fraction=tunable / total,
        grounder_flops=g_flops,
        generator_flops_per_step=step_flops,
        ddim_steps=steps,
        prompted_flops_per_sample=prompted,
    )


def prompt_token_counts(tuner: "PromptTuner") -> tuple[int, int]:
    """Prompt tokens per layer entering the vision and language towers."""
    if not tuner.depth:
        return 0, 0
    store = tuner.global_prompts
    n_global_v = 0 if store.visual is None else store.visual.shape[1]
    n_global_l = 0 if store.textual is None else store.textual.shape[1]
    return tuner.visual_adapter(0).n_prompts + n_global_v, tuner.textual_adapter(0).n_prompts + n_global_l


@torch.no_grad()
def measure_inference_ms(detector: Detector, batch: SampleBatch, repeats: int = 3) -> float:
    """Mean wall-clock milliseconds per sample of ``detector`` on ``batch``."""
    detector.detect_batch(batch)
    start = time.perf_counter()
    for _ in range(repeats):
        detector.detect_batch(batch)
    elapsed = time.perf_counter() - start
    return 1000.0 * elapsed / (repeats * len(batch))
