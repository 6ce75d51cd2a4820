"""
Unit tests for the synthetic corpus and the dataset file format.
"""

from pathlib import Path

import numpy as np
import pytest
import torch

from diffprompt.core.exceptions import (
    BadMagicError,
    ConfigurationError,
    DataGenerationError,
    DatasetFormatError,
    TruncatedRecordError,
    VersionMismatchError,
)
from diffprompt.schemas.config import COLOR_TABLE, EXTREME_RELATIONS, HALF_RELATIONS, CorpusConfig, SceneConfig
from diffprompt.services.data_service import (
    HEADER,
    MAGIC,
    SampleDataset,
    Shape,
    caption_referents,
    generate_sample,
    generate_scene,
    generate_split,
    mask_to_box,
    read_dataset,
    read_manifest,
    record_size,
    render_silhouette,
    write_dataset,
)

SCENE = SceneConfig(image_size=32, caption_len=8)
CORPUS = CorpusConfig(scene=SCENE, train_size=6, val_size=3, test_size=2)


def _described_by(words: list[str], shapes: tuple[Shape, ...], image_size: int) -> list[int]:
    """Shapes a caption picks out, evaluated one shape at a time."""
    attributes = [w for w in words if w not in ("the",) + HALF_RELATIONS + EXTREME_RELATIONS]
    relations = [w for w in words if w in HALF_RELATIONS + EXTREME_RELATIONS]
    assert len(relations) <= 1
    matching = [i for i, s in enumerate(shapes) if set(attributes) <= {s.size, s.color, s.kind}]
    if not relations:
        return matching
    relation = relations[0]
    mid = image_size / 2
    side = {
        "left": lambda s: s.cx < mid,
        "right": lambda s: s.cx >= mid,
        "top": lambda s: s.cy < mid,
        "bottom": lambda s: s.cy >= mid,
    }
    if relation in side:
        return [i for i in matching if side[relation](shapes[i])]
    sign = 1 if relation == "leftmost" else -1
    return [
        i for i in matching
        if all(sign * shapes[i].cx < sign * shapes[j].cx for j in matching if j != i)
    ]


@pytest.mark.slow
class TestCorpusSemantics:
    """Checks of default-size samples against an evaluator written apart from the generator."""

    def test_thousand_captions_name_only_the_target(self):
        """Test that each of 1000 captions describes exactly the target shape."""
        scene_cfg = SceneConfig()
        vocab = scene_cfg.vocab()
        relation_counts = dict.fromkeys(HALF_RELATIONS + EXTREME_RELATIONS + ("none",), 0)
        for seed in range(1000):
            scene = generate_scene(seed, scene_cfg)
            sample = generate_sample(seed, scene_cfg, vocab)
            words = vocab.decode(sample.caption.tolist())
            assert words[0] == "the"
            assert _described_by(words, scene.shapes, scene_cfg.image_size) == [scene.target], seed
            relation = next((w for w in words if w in relation_counts), "none")
            relation_counts[relation] += 1
        assert relation_counts["none"] < 1000

    def test_thousand_boxes_are_tight_with_exclusive_edges(self):
        """Test that each box spans exactly the target pixels, max edges one past the last pixel."""
        scene_cfg = SceneConfig()
        for seed in range(1000):
            scene = generate_scene(seed, scene_cfg)
            sample = generate_sample(seed, scene_cfg)
            ys, xs = torch.nonzero(sample.mask[0] > 0.5, as_tuple=True)
            expected = [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]
            assert sample.box.tolist() == expected, seed
            target = scene.shapes[scene.target]
            color = torch.tensor(COLOR_TABLE[target.color], dtype=torch.float32)
            assert torch.equal(sample.image[:, ys, xs], color[:, None].expand(-1, len(xs))), seed


def _write(tmp_path: Path, count: int = 3) -> Path:
    path = tmp_path / "train.dpds"
    samples = [generate_sample(seed, SCENE) for seed in range(count)]
    write_dataset(samples, path, CORPUS, "train")
    return path


class TestGenerateSample:
    """Tests for deterministic sample generation."""

    def test_same_seed_same_sample(self):
        """Test that a seed reproduces the sample bit for bit."""
        a = generate_sample(42, SCENE)
        b = generate_sample(42, SCENE)
        assert torch.equal(a.image, b.image)
        assert torch.equal(a.caption, b.caption)
        assert torch.equal(a.mask, b.mask)
        assert torch.equal(a.box, b.box)
        assert a.sample_id == 42

    def test_shapes_and_ranges(self):
        """Test tensor shapes, dtypes and value ranges."""
        sample = generate_sample(3, SCENE)
        assert sample.image.shape == (3, 32, 32)
        assert sample.image.dtype == torch.float32
        assert float(sample.image.min()) >= 0.0 and float(sample.image.max()) <= 1.0
        assert sample.caption.shape == (8,)
        assert sample.caption.dtype == torch.int64
        assert sample.mask.shape == (1, 32, 32)
        assert set(sample.mask.unique().tolist()) <= {0.0, 1.0}

    def test_box_is_tight_bbox_of_mask(self):
        """Test that the box is the tight bounding box of the target mask."""
        for seed in range(10):
            sample = generate_sample(seed, SCENE)
            mask = sample.mask[0].numpy() > 0.5
            assert mask.sum() > 0
            assert np.array_equal(sample.box.numpy(), mask_to_box(mask))

    def test_caption_is_unambiguous(self):
        """Test that every generated caption refers to exactly its target."""
        for seed in range(25):
            scene = generate_scene(seed, SCENE)
            assert caption_referents(scene.words, scene.shapes, SCENE.image_size) == [scene.target]

    def test_caption_decodes_to_scene_words(self):
        """Test that the encoded caption decodes back to the scene words."""
        vocab = SCENE.vocab()
        scene = generate_scene(11, SCENE)
        sample = generate_sample(11, SCENE, vocab)
        assert vocab.decode(sample.caption.tolist()) == list(scene.words)

    def test_placement_failure_raises(self):
        """Test that an impossible scene raises DataGenerationError."""
        crowded = SceneConfig(
            image_size=16,
            min_shapes=4,
            max_shapes=4,
            small_radius=(0.3, 0.35),
            big_radius=(0.4, 0.45),
            max_rejections=2,
        )
        with pytest.raises(DataGenerationError):
            generate_sample(0, crowded)


class TestCaptionReferents:
    """Tests for caption semantics."""

    shapes = (
        Shape("circle", "red", "small", 5, 5, 3),
        Shape("circle", "red", "small", 25, 5, 3),
        Shape("square", "blue", "big", 25, 25, 6),
    )

    def test_attribute_filter(self):
        """Test filtering by color and kind."""
        assert caption_referents(["the", "red", "circle"], self.shapes, 32) == [0, 1]
        assert caption_referents(["the", "blue", "square"], self.shapes, 32) == [2]

    def test_half_relations(self):
        """Test that left/right compare the centre with the mid-line."""
        assert caption_referents(["red", "circle", "left"], self.shapes, 32) == [0]
        assert caption_referents(["red", "circle", "right"], self.shapes, 32) == [1]
        assert caption_referents(["red", "circle", "bottom"], self.shapes, 32) == []

    def test_extreme_relations(self):
        """Test leftmost/rightmost among matching shapes."""
        assert caption_referents(["red", "circle", "rightmost"], self.shapes, 32) == [1]
        assert caption_referents(["circle", "leftmost"], self.shapes, 32) == [0]

    def test_extreme_tie_matches_nothing(self):
        """Test that a tie on the extreme coordinate leaves no referent."""
        shapes = (Shape("circle", "red", "small", 5, 5, 3), Shape("circle", "red", "small", 5, 25, 3))
        assert caption_referents(["red", "circle", "leftmost"], shapes, 32) == []


class TestRendering:
    """Tests for silhouettes and boxes."""

    def test_square_box_has_exclusive_max_edges(self):
        """Test the box of a radius-2 square centred at (5, 5)."""
        mask = render_silhouette(Shape("square", "red", "small", 5, 5, 2), 16)
        assert mask[3:7, 3:7].all()
        assert mask.sum() == 16
        assert mask_to_box(mask).tolist() == [3.0, 3.0, 7.0, 7.0]

    def test_empty_mask_rejected(self):
        """Test that an empty mask has no box."""
        from diffprompt.core.exceptions import OutOfRangeError

        with pytest.raises(OutOfRangeError):
            mask_to_box(np.zeros((8, 8), dtype=bool))


class TestSceneConfig:
    """Tests for corpus configuration validation."""

    def test_small_palette_rejected(self):
        """Test that fewer than four colors is a configuration error."""
        with pytest.raises(ConfigurationError):
            SceneConfig(palette=["red", "green", "blue"])

    def test_overlapping_radius_classes_rejected(self):
        """Test that size classes must be disjoint."""
        with pytest.raises(ConfigurationError):
            SceneConfig(small_radius=(0.1, 0.2), big_radius=(0.15, 0.25))

    def test_image_size_multiple_of_eight(self):
        """Test that the image side must be divisible by the VAE downsampling."""
        with pytest.raises(ConfigurationError):
            SceneConfig(image_size=36)

    def test_split_ranges_are_contiguous(self):
        """Test that splits partition a contiguous id range."""
        ranges = CorpusConfig(train_size=5, val_size=2, test_size=1, id_offset=10).split_ranges()
        assert ranges == {"train": (10, 15), "val": (15, 17), "test": (17, 18)}


class TestDatasetFile:
    """Tests for writing and reading dataset files."""

    def test_write_then_read(self, tmp_path: Path):
        """Test that a written split reads back unchanged."""
        path = tmp_path / "val.dpds"
        samples = list(generate_split(CORPUS, "val"))
        write_dataset(samples, path, CORPUS, "val")
        loaded = list(read_dataset(path))
        assert [s.sample_id for s in loaded] == [6, 7, 8]
        for original, copy in zip(samples, loaded):
            assert torch.equal(original.image, copy.image)
            assert torch.equal(original.caption, copy.caption)
            assert torch.equal(original.mask, copy.mask)
            assert torch.equal(original.box, copy.box)

    def test_file_size_and_manifest(self, tmp_path: Path):
        """Test the header plus fixed-size records and the sidecar manifest."""
        path = _write(tmp_path, count=3)
        assert path.stat().st_size == HEADER.size + 3 * record_size(32, 8)
        manifest = read_manifest(path)
        assert manifest.count == 3
        assert manifest.id_range == (0, 3)
        assert manifest.splits["val"] == (6, 9)
        assert len(manifest.digest) == 64

    def test_bad_magic(self, tmp_path: Path):
        """Test that a foreign file is rejected."""
        path = _write(tmp_path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            read_dataset(path)

    def test_version_mismatch(self, tmp_path: Path):
        """Test that another format version is rejected."""
        path = _write(tmp_path)
        data = bytearray(path.read_bytes())
        data[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            read_dataset(path)

    def test_truncated_file(self, tmp_path: Path):
        """Test that a file shorter than its records is rejected before yielding data."""
        path = _write(tmp_path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(TruncatedRecordError):
            read_dataset(path)

    def test_trailing_bytes(self, tmp_path: Path):
        """Test that extra bytes after the last record are rejected."""
        path = _write(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_header_layout(self, tmp_path: Path):
        """Test the little-endian header fields."""
        path = _write(tmp_path, count=2)
        magic, version, count, size, caption_len = HEADER.unpack(path.read_bytes()[:HEADER.size])
        assert (magic, version, count, size, caption_len) == (MAGIC, 1, 2, 32, 8)


class TestSampleDataset:
    """Tests for the in-memory split."""

    def test_shuffle_is_generator_driven(self):
        """Test that shuffling depends only on the generator seed."""
        dataset = SampleDataset(generate_split(CORPUS, "train"))
        order = lambda seed: [
            sid for batch in dataset.batches(4, shuffle=True, generator=torch.Generator().manual_seed(seed))
            for sid in batch.sample_ids
        ]
        assert order(1) == order(1)
        assert sorted(order(1)) == list(range(6))

    def test_batch_stacks_rows(self):
        """Test batch tensor shapes."""
        dataset = SampleDataset(generate_split(CORPUS, "train"))
        batch = dataset.batch([0, 2])
        assert batch.images.shape == (2, 3, 32, 32)
        assert batch.boxes.shape == (2, 4)
        assert batch.sample_ids == [0, 2]
