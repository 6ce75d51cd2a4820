"""
Unit tests for the grounder, its detection head and stage-0 helpers.
"""

import pytest
import torch

from diffprompt.core.exceptions import ConfigurationError, ShapeMismatchError
from diffprompt.models.grounder import GrounderFeatures, GrounderModel, HeadOutput, build_anchors
from diffprompt.models.prompting import PromptSet
from diffprompt.schemas.config import GrounderConfig
from diffprompt.services.grounder_service import (
    GrounderDetector,
    assign_anchors,
    decode_offsets,
    detect,
    encode_boxes,
    encode_with_prompts,
    grounder_loss,
    nms,
    pairwise_iou,
    pretrain_grounder,
)
from tests.conftest import make_config


def _prompts(batch: int, depth: int, n: int, width: int, dtype=torch.float32) -> PromptSet:
    return PromptSet(
        batch_size=batch,
        visual=[torch.randn(batch, n, width, dtype=dtype) for _ in range(depth)],
        textual=[torch.randn(batch, n, width, dtype=dtype) for _ in range(depth)],
        global_visual=[torch.randn(1, width, dtype=dtype) for _ in range(depth)],
        global_textual=[torch.randn(1, width, dtype=dtype) for _ in range(depth)],
    )


class TestAnchors:
    """Tests for the anchor layout."""

    def test_one_anchor_per_token_and_scale(self):
        """Test anchor count and the token-major ordering."""
        anchors = build_anchors(32, 8, (8.0, 16.0))
        assert anchors.shape == (16 * 2, 4)
        # Token 5 is row 1, column 1: centre (12, 12).
        assert anchors[10].tolist() == [8.0, 8.0, 16.0, 16.0]
        assert anchors[11].tolist() == [4.0, 4.0, 20.0, 20.0]

    def test_model_anchor_buffer(self, grounder):
        """Test that the model holds tokens × scales anchors."""
        assert grounder.num_anchors == grounder.num_tokens * len(grounder.cfg.anchor_scales)


class TestPromptInjection:
    """Tests for deep-prompt injection into both towers."""

    def test_empty_prompt_set_is_plain_forward(self, grounder, train_split):
        """Test that an empty PromptSet leaves the forward bit-identical."""
        batch = train_split.batch([0, 1, 2])
        grounder.eval()
        plain = grounder(batch.images, batch.captions)
        empty = grounder(batch.images, batch.captions, PromptSet.empty(3))
        assert torch.equal(plain.logits, empty.logits)
        assert torch.equal(plain.offsets, empty.offsets)

    def test_prompt_outputs_discarded(self, grounder, train_split):
        """Test that prompts change features but never the token counts."""
        batch = train_split.batch([0, 1])
        grounder.eval()
        plain = encode_with_prompts(grounder, batch.images, batch.captions)
        prompted = encode_with_prompts(grounder, batch.images, batch.captions, _prompts(2, 2, 3, grounder.width))
        assert prompted.vis.shape == plain.vis.shape
        assert prompted.txt.shape == plain.txt.shape
        assert not torch.allclose(prompted.vis, plain.vis)
        assert not torch.allclose(prompted.txt, plain.txt)

    def test_too_deep_prompts_rejected(self, grounder, train_split):
        """Test that more prompted layers than the tower has is an error."""
        batch = train_split.batch([0])
        with pytest.raises(ConfigurationError):
            grounder(batch.images, batch.captions, _prompts(1, grounder.depth + 1, 2, grounder.width))

    def test_prompt_width_mismatch(self, grounder, train_split):
        """Test that prompt tokens must match the tower width."""
        batch = train_split.batch([0])
        with pytest.raises(ShapeMismatchError):
            grounder(batch.images, batch.captions, PromptSet(batch_size=1, visual=[torch.zeros(1, 2, 3)]))

    def test_single_modality_prompts(self, grounder, train_split):
        """Test that an unprompted tower runs its plain layers."""
        batch = train_split.batch([0])
        grounder.eval()
        plain = grounder.encode(batch.images, batch.captions)
        visual_only = grounder.encode(
            batch.images, batch.captions, PromptSet(batch_size=1, global_visual=[torch.randn(2, grounder.width)])
        )
        assert torch.equal(visual_only.txt, plain.txt)

    def test_bad_image_shape(self, grounder):
        """Test that images must match the configured size."""
        with pytest.raises(ShapeMismatchError):
            grounder(torch.zeros(1, 3, 16, 16), torch.zeros(1, grounder.caption_len, dtype=torch.long))


class TestHead:
    """Tests for the bias-free detection head."""

    def test_zero_features_give_zero_outputs(self, grounder):
        """Test that zero features score 0 and regress no offset."""
        features = GrounderFeatures(
            vis=torch.zeros(2, grounder.num_tokens, grounder.width),
            txt=torch.zeros(2, grounder.caption_len, grounder.width),
            txt_pad_mask=torch.zeros(2, grounder.caption_len, dtype=torch.bool),
        )
        out = grounder.head(features)
        assert torch.equal(out.logits, torch.zeros_like(out.logits))
        assert torch.equal(out.offsets, torch.zeros_like(out.offsets))

    def test_detect_ranked_and_capped(self, grounder, train_split):
        """Test that detections are sorted, capped and inside the image."""
        batch = train_split.batch([0, 1])
        detections = detect(grounder, grounder.encode(batch.images, batch.captions))
        assert len(detections) == 2
        for dets in detections:
            assert 0 < len(dets) <= grounder.cfg.max_detections
            assert bool((dets.scores[:-1] >= dets.scores[1:]).all())
            assert float(dets.boxes.min()) >= 0.0
            assert float(dets.boxes.max()) <= grounder.image_size

    def test_detector_matches_detect(self, grounder, train_split):
        """Test that the frozen-baseline detector wraps detect."""
        batch = train_split.batch([3])
        direct = detect(grounder, grounder.encode(batch.images, batch.captions))[0]
        wrapped = GrounderDetector(grounder).detect_batch(batch)[0]
        assert torch.equal(direct.boxes, wrapped.boxes)


class TestBoxes:
    """Tests for IoU, box coding and NMS."""

    def test_pairwise_iou_degenerate(self):
        """Test that a zero-area pair scores 0 rather than NaN."""
        point = torch.tensor([[1.0, 1.0, 1.0, 1.0]])
        assert pairwise_iou(point, point).item() == 0.0

    def test_offsets_invert_box_encoding(self):
        """Test that decoding encoded targets recovers the box."""
        anchors = torch.tensor([[0.0, 0.0, 8.0, 8.0], [8.0, 8.0, 24.0, 24.0]])
        boxes = torch.tensor([[2.0, 1.0, 10.0, 13.0], [5.0, 9.0, 20.0, 30.0]])
        decoded = decode_offsets(anchors, encode_boxes(anchors, boxes), 32)
        assert torch.allclose(decoded, boxes, atol=1e-5)

    def test_decoded_boxes_clipped(self):
        """Test that decoded boxes stay inside the image."""
        anchors = torch.tensor([[0.0, 0.0, 8.0, 8.0]])
        decoded = decode_offsets(anchors, torch.tensor([[-5.0, -5.0, 3.0, 3.0]]), 32)
        assert float(decoded.min()) >= 0.0 and float(decoded.max()) <= 32.0

    def test_nms_suppresses_duplicates(self):
        """Test greedy suppression with ties broken by the lower index."""
        boxes = torch.tensor([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]])
        scores = torch.tensor([0.5, 0.5, 0.9])
        assert nms(boxes, scores, 0.5, 10).tolist() == [2, 0]
        assert nms(boxes, scores, 0.5, 1).tolist() == [2]

    def test_nms_keeps_threshold_overlap(self):
        """Test that an IoU equal to the threshold is not suppressed."""
        boxes = torch.tensor([[0.0, 0.0, 4.0, 4.0], [0.0, 0.0, 4.0, 8.0]])
        scores = torch.tensor([0.9, 0.8])
        assert nms(boxes, scores, 0.5, 10).tolist() == [0, 1]


class TestLoss:
    """Tests for anchor assignment and the grounding loss."""

    def test_best_anchor_always_positive(self):
        """Test that a box overlapping no anchor well still gets one positive."""
        anchors = build_anchors(32, 8, (8.0,))
        gt = torch.tensor([[1.0, 1.0, 3.0, 3.0]])
        positive, negative = assign_anchors(anchors, gt)
        assert int(positive.sum()) == 1
        assert bool(positive[0, 0])
        assert not bool((positive & negative).any())

    def test_exact_anchor_match(self):
        """Test that an anchor equal to the box is positive."""
        anchors = build_anchors(32, 8, (8.0,))
        positive, _ = assign_anchors(anchors, anchors[5:6])
        assert bool(positive[0, 5])

    def test_loss_vanishes_at_perfect_outputs(self):
        """Test that confident correct logits and exact offsets give a near-zero loss."""
        cfg = make_config().grounder
        anchors = build_anchors(32, 8, (8.0, 14.0, 24.0))
        gt = torch.tensor([[3.0, 4.0, 17.0, 19.0], [10.0, 2.0, 30.0, 12.0]])
        positive, _ = assign_anchors(anchors, gt, cfg.positive_iou, cfg.negative_iou)
        offsets = encode_boxes(anchors.unsqueeze(0).expand(2, -1, -1), gt.unsqueeze(1).expand(-1, anchors.shape[0], -1))
        perfect = HeadOutput(logits=torch.where(positive, 20.0, -20.0), offsets=offsets)
        assert float(grounder_loss(perfect, gt, anchors, cfg)) < 1e-3

        wrong_class = HeadOutput(logits=torch.where(positive, -20.0, 20.0), offsets=offsets)
        assert float(grounder_loss(wrong_class, gt, anchors, cfg)) > 1.0
        wrong_boxes = HeadOutput(logits=perfect.logits, offsets=torch.zeros_like(offsets))
        assert float(grounder_loss(wrong_boxes, gt, anchors, cfg)) > 1e-3

    def test_loss_backpropagates(self, grounder, train_split):
        """Test that the loss is finite and reaches every head weight."""
        batch = train_split.batch([0, 1, 2, 3])
        loss = grounder_loss(grounder(batch.images, batch.captions), batch.boxes, grounder.anchors, grounder.cfg)
        assert torch.isfinite(loss)
        loss.backward()
        assert grounder.head.anchor_proj.weight.grad is not None
        assert grounder.head.box_reg.weight.grad is not None
        assert grounder.patch_embed.proj.weight.grad is not None

    @pytest.mark.slow
    def test_gradcheck_all_parameters(self):
        """Test analytic gradients of a two-layer grounder against central differences."""
        cfg = GrounderConfig(patch_size=8, width=8, depth=2, num_heads=2, anchor_scales=(8.0, 12.0))
        model = GrounderModel(cfg, image_size=16, vocab_size=10, caption_len=4).double()
        images = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        captions = torch.tensor([[2, 5, 1, 0]])
        prompts = _prompts(1, 2, 2, 8, dtype=torch.float64)
        w_logits = torch.randn(1, model.num_anchors, dtype=torch.float64)
        w_offsets = torch.randn(1, model.num_anchors, 4, dtype=torch.float64)

        def objective(*params):
            out = model(images, captions, prompts)
            return (out.logits * w_logits).sum() + (out.offsets * w_offsets).sum()

        assert torch.autograd.gradcheck(objective, tuple(model.parameters()), eps=1e-6, atol=1e-5, rtol=1e-3)


@pytest.mark.slow
class TestPretrain:
    """Tests for stage-0 pretraining."""

    def test_pretrain_returns_losses_and_report(self, grounder, train_split, val_split):
        """Test one epoch of pretraining with validation recall."""
        cfg = make_config()
        model, losses, report = pretrain_grounder(grounder, train_split, cfg.stage0, 1, val_split, cfg)
        assert len(losses) == cfg.stage0.epochs
        assert report is not None
        assert report.n == len(val_split)
        assert 0.0 <= report.r1 <= report.upper_bound <= 1.0
        assert not model.training
