"""
Grounder operations and stage-0 pretraining.

This module provides:
- Prompt-aware encoding through the two towers
- Anchor decoding, greedy NMS and the ranked detection list
- Anchor assignment and the classification + localization loss
- Stage-0 pretraining with validation recall

Python 3.13 Compatible.
"""

from __future__ import annotations

import logging
import math
from typing import Optional

import torch
import torch.nn.functional as F
from torchvision.ops import box_iou

from diffprompt.models.grounder import GrounderFeatures, GrounderModel, HeadOutput
from diffprompt.models.prompting import PromptSet
from diffprompt.schemas.config import GrounderConfig, RunConfig, StageConfig
from diffprompt.schemas.report import EvalReport, StageReport
from diffprompt.services.base_service import StageService, fit
from diffprompt.services.data_service import SampleBatch, SampleDataset
from diffprompt.services.eval_service import DetectionList, evaluate

logger = logging.getLogger(__name__)

# Upper bound on log width/height scale offsets.
BBOX_XFORM_CLIP = math.log(1000.0 / 16)


def build_grounder(cfg: RunConfig) -> GrounderModel:
    scene = cfg.corpus.scene
    vocab = scene.vocab()
    return GrounderModel(cfg.grounder, scene.image_size, len(vocab), scene.caption_len, vocab.pad_id)


def encode_with_prompts(
    model: GrounderModel,
    images: torch.Tensor,
    captions: torch.Tensor,
    prompts: Optional[PromptSet] = None,
) -> GrounderFeatures:
    """Final-layer features of both towers with deep prompts in the first D layers."""
    return model.encode(images, captions, prompts)


# ============================================================
# Boxes
# ============================================================

def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU matrix of N×4 and M×4 boxes; pairs with an empty union score 0."""
    return torch.nan_to_num(box_iou(a, b), nan=0.0)


def decode_offsets(anchors: torch.Tensor, offsets: torch.Tensor, image_size: int) -> torch.Tensor:
    """Apply (dx, dy, dw, dh) offsets to anchors and clip to the image."""
    widths = anchors[:, 2] - anchors[:, 0]
    heights = anchors[:, 3] - anchors[:, 1]
    cx = anchors[:, 0] + 0.5 * widths
    cy = anchors[:, 1] + 0.5 * heights
    dx, dy, dw, dh = offsets.unbind(-1)
    dw = dw.clamp(max=BBOX_XFORM_CLIP)
    dh = dh.clamp(max=BBOX_XFORM_CLIP)
    pcx = cx + dx * widths
    pcy = cy + dy * heights
    pw = widths * torch.exp(dw)
    ph = heights * torch.exp(dh)
    boxes = torch.stack([pcx - 0.5 * pw, pcy - 0.5 * ph, pcx + 0.5 * pw, pcy + 0.5 * ph], dim=-1)
    return boxes.clamp(min=0.0, max=float(image_size))


def encode_boxes(anchors: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Regression targets mapping ``anchors`` onto ``boxes`` (inverse of decode_offsets)."""
    widths = anchors[..., 2] - anchors[..., 0]
    heights = anchors[..., 3] - anchors[..., 1]
    cx = anchors[..., 0] + 0.5 * widths
    cy = anchors[..., 1] + 0.5 * heights
    gw = boxes[..., 2] - boxes[..., 0]
    gh = boxes[..., 3] - boxes[..., 1]
    gcx = boxes[..., 0] + 0.5 * gw
    gcy = boxes[..., 1] + 0.5 * gh
    return torch.stack(
        [(gcx - cx) / widths, (gcy - cy) / heights, torch.log(gw / widths), torch.log(gh / heights)], dim=-1
    )


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float, max_keep: int) -> torch.Tensor:
    """
    Greedy non-maximum suppression.

    Boxes are visited by descending score with ties broken by lower index;
    a box is suppressed when its IoU with a kept box exceeds the threshold.

    Returns:
        Indices of kept boxes in descending-score order (at most ``max_keep``)
    """
    order = torch.sort(scores, descending=True, stable=True).indices.tolist()
    overlaps = pairwise_iou(boxes, boxes)
    suppressed = torch.zeros(len(order), dtype=torch.bool)
    keep: list[int] = []
    for index in order:
        if suppressed[index]:
            continue
        keep.append(index)
        if len(keep) == max_keep:
            break
        suppressed |= overlaps[index].cpu() > iou_threshold
    return torch.tensor(keep, dtype=torch.long)


@torch.no_grad()
def detect(model: GrounderModel, features: GrounderFeatures) -> list[DetectionList]:
    """
    Score anchors, decode boxes, suppress and keep the top detections.

    Returns:
        One DetectionList per batch row, scores sorted descending
    """
    out = model.head(features)
    scores = torch.sigmoid(out.logits)
    boxes = decode_offsets(model.anchors, out.offsets, model.image_size)
    results = []
    for b in range(scores.shape[0]):
        keep = nms(boxes[b], scores[b], model.cfg.nms_iou, model.cfg.max_detections)
        results.append(DetectionList(boxes=boxes[b][keep].cpu(), scores=scores[b][keep].cpu()))
    return results


# ============================================================
# Loss
# ============================================================

def assign_anchors(
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    positive_iou: float = 0.6,
    negative_iou: float = 0.4,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Positive and negative anchor masks (B×A) for one ground-truth box per row.

    Positives: IoU ≥ positive_iou, plus the max-IoU anchor (lowest index on
    ties). Negatives: IoU < negative_iou and not positive.
    """
    iou = pairwise_iou(gt_boxes, anchors.to(gt_boxes.dtype))
    positive = iou >= positive_iou
    best = iou.argmax(dim=1)
    positive[torch.arange(iou.shape[0]), best] = True
    negative = (iou < negative_iou) & ~positive
    return positive, negative


def grounder_loss(
    pred: HeadOutput,
    gt_boxes: torch.Tensor,
    anchors: torch.Tensor,
    cfg: GrounderConfig,
) -> torch.Tensor:
    """
    Binary cross-entropy over assigned anchors plus smooth-L1 on positive offsets.
    """
    positive, negative = assign_anchors(anchors, gt_boxes, cfg.positive_iou, cfg.negative_iou)
    assigned = positive | negative
    labels = positive.to(pred.logits.dtype)
    cls = F.binary_cross_entropy_with_logits(pred.logits[assigned], labels[assigned])
    targets = encode_boxes(
        anchors.to(gt_boxes.dtype).unsqueeze(0).expand(gt_boxes.shape[0], -1, -1),
        gt_boxes.unsqueeze(1).expand(-1, anchors.shape[0], -1),
    )
    loc = F.smooth_l1_loss(pred.offsets[positive], targets[positive].to(pred.offsets.dtype))
    return cls + loc


# ============================================================
# Detector and pretraining
# ============================================================

class GrounderDetector:
    """Prompt-free (frozen-baseline) detector."""

    def __init__(self, model: GrounderModel) -> None:
        self.model = model

    @torch.no_grad()
    def detect_batch(self, batch: SampleBatch) -> list[DetectionList]:
        features = self.model.encode(batch.images, batch.captions)
        return detect(self.model, features)


def pretrain_grounder(
    model: GrounderModel,
    dataset: SampleDataset,
    stage: StageConfig,
    seed: int,
    val: Optional[SampleDataset] = None,
    run_cfg: Optional[RunConfig] = None,
    on_epoch=None,
) -> tuple[GrounderModel, list[float], Optional[EvalReport]]:
    """
    Stage-0 pretraining of the grounder.

    Args:
        model: Freshly built grounder
        dataset: Training split
        stage: Stage-0 optimizer settings
        seed: Training stream seed
        val: Optional validation split for R@K / UB
        run_cfg: Run configuration (vocabulary for per-category metrics)
        on_epoch: Called with (epoch, mean loss)

    Returns:
        (trained model, per-epoch losses, validation report or None)

    Raises:
        TrainingDivergenceError: If the loss becomes NaN
    """
    device = next(model.parameters()).device
    model.train()

    def loss_fn(batch: SampleBatch, generator: torch.Generator, epoch: int) -> torch.Tensor:
        batch = batch.to(device)
        return grounder_loss(model(batch.images, batch.captions), batch.boxes, model.anchors, model.cfg)

    losses = fit(model.parameters(), dataset, stage, seed, loss_fn, "pretrain", on_epoch)
    model.eval()
    report = None
    if val is not None and len(val):
        report = evaluate(GrounderDetector(model), val, run_cfg or RunConfig(), label="grounder", split=val.name)
    return model, losses, report


class GrounderStage(StageService):
    """Stage 0: pretrain the stand-in grounder on the training split."""

    @property
    def stage_name(self) -> str:
        return "pretrain"

    @property
    def component(self) -> str:
        return "grounder"

    def run(self) -> StageReport:
        upstream = self.upstream_digests(self.component)
        train = self.load_split("train")
        val = self.load_split("val")

        self.seed_torch()
        model = build_grounder(self.cfg).to(self.device)
        model, losses, report = pretrain_grounder(
            model, train, self.cfg.stage0, self.seed("train"), val, self.cfg, self.log_epoch
        )
        metrics = {}
        if report is not None:
            metrics = {"val_r1": report.r1, "val_r5": report.r5, "val_ub": report.upper_bound}
        self.logger.info("Grounder pretrained", extra={"stage": self.stage_name, **metrics})
        digest = self.save(
            model,
            upstream,
            metadata={
                "depth": self.cfg.grounder.depth,
                "width": self.cfg.grounder.width,
                "anchor_scales": list(self.cfg.grounder.anchor_scales),
            },
        )
        stage_report = StageReport(
            stage=self.stage_name,
            epochs=self.cfg.stage0.epochs,
            epoch_losses=losses,
            metrics=metrics,
            evaluation=report,
            config_hash=self.cfg.config_hash(),
            digest=digest,
            upstream=upstream,
        )
        self.write_report(self.stage_name, stage_report)
        return stage_report
