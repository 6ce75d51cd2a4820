"""
Synthetic referring-expression corpus.

This module provides:
- Deterministic scene generation (geometric shapes, grammar captions)
- Exact hard-edged rendering of images, target masks and tight boxes
- The little-endian dataset file format with a JSON sidecar manifest
- Tensor datasets and batch collation for the training stages

Python 3.13 Compatible.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from diffprompt.core.config import settings
from diffprompt.core.exceptions import (
    BadMagicError,
    DataGenerationError,
    DatasetFormatError,
    OutOfRangeError,
    TruncatedRecordError,
    VersionMismatchError,
)
from diffprompt.schemas.checkpoint import DATASET_FORMAT_VERSION, DatasetManifest
from diffprompt.schemas.config import (
    COLOR_TABLE,
    EXTREME_RELATIONS,
    HALF_RELATIONS,
    CorpusConfig,
    SceneConfig,
    Vocab,
)
from diffprompt.services.checkpoint_service import file_sha256

logger = logging.getLogger(__name__)

MAGIC = b"DPDS"
HEADER = struct.Struct("<4sIQII")

# Minimum empty border between shape bounding squares.
PLACEMENT_MARGIN = 2
PLACEMENT_TRIES = 50

_DISTRACTOR_MODES = ("same_kind", "same_color", "same_both", "random")


# ============================================================
# Domain types
# ============================================================

@dataclass(frozen=True)
class Shape:
    """One rendered shape; (cx, cy, radius) in integer pixels."""

    kind: str
    color: str
    size: str
    cx: int
    cy: int
    radius: int


@dataclass(frozen=True)
class Scene:
    shapes: tuple[Shape, ...]
    target: int
    words: tuple[str, ...]


@dataclass
class Sample:
    """
    One corpus entry.

    Attributes:
        image: float32 3×H×W in [0, 1]
        caption: int64 token ids, PAD-right-padded to caption_len
        mask: float32 1×H×W with values in {0, 1}
        box: float32 (x_min, y_min, x_max, y_max); max edges are exclusive
        sample_id: generation seed
    """

    image: torch.Tensor
    caption: torch.Tensor
    mask: torch.Tensor
    box: torch.Tensor
    sample_id: int

    def to_bytes(self) -> bytes:
        return _pack_record(self)


@dataclass
class SampleBatch:
    """Stacked samples: images B×3×H×W, captions B×L, masks B×1×H×W, boxes B×4."""

    images: torch.Tensor
    captions: torch.Tensor
    masks: torch.Tensor
    boxes: torch.Tensor
    sample_ids: list[int]

    def __len__(self) -> int:
        return len(self.sample_ids)

    def to(self, device: str | torch.device) -> "SampleBatch":
        return SampleBatch(
            images=self.images.to(device),
            captions=self.captions.to(device),
            masks=self.masks.to(device),
            boxes=self.boxes.to(device),
            sample_ids=self.sample_ids,
        )


def collate_samples(samples: list[Sample]) -> SampleBatch:
    return SampleBatch(
        images=torch.stack([s.image for s in samples]),
        captions=torch.stack([s.caption for s in samples]),
        masks=torch.stack([s.mask for s in samples]),
        boxes=torch.stack([s.box for s in samples]),
        sample_ids=[s.sample_id for s in samples],
    )


# ============================================================
# Caption semantics
# ============================================================

def radius_range(fractions: tuple[float, float], image_size: int) -> tuple[int, int]:
    """Inclusive integer radius range of a size class."""
    low = max(2, math.ceil(fractions[0] * image_size))
    high = max(low, math.floor(fractions[1] * image_size))
    return low, high


def caption_referents(words: Iterable[str], shapes: Iterable[Shape], image_size: int) -> list[int]:
    """
    Indices of the shapes a caption describes.

    Attribute words filter by size, color and kind. ``left``/``right``/``top``/
    ``bottom`` compare the shape centre with the image mid-lines;
    ``leftmost``/``rightmost`` keep the single strictly extreme shape among
    those matching the other words (a tie keeps none).
    """
    shapes = list(shapes)
    words = [w for w in words if w != "the"]
    half = image_size / 2
    candidates = list(range(len(shapes)))
    relation = None

    for word in words:
        if word in HALF_RELATIONS or word in EXTREME_RELATIONS:
            relation = word
            continue
        candidates = [
            i for i in candidates
            if word in (shapes[i].size, shapes[i].color, shapes[i].kind)
        ]

    if relation == "left":
        candidates = [i for i in candidates if shapes[i].cx < half]
    elif relation == "right":
        candidates = [i for i in candidates if shapes[i].cx >= half]
    elif relation == "top":
        candidates = [i for i in candidates if shapes[i].cy < half]
    elif relation == "bottom":
        candidates = [i for i in candidates if shapes[i].cy >= half]
    elif relation in EXTREME_RELATIONS and candidates:
        xs = [shapes[i].cx for i in candidates]
        extreme = min(xs) if relation == "leftmost" else max(xs)
        winners = [i for i in candidates if shapes[i].cx == extreme]
        candidates = winners if len(winners) == 1 else []
    return candidates


def _caption_candidates(target: Shape, rng: np.random.Generator) -> list[tuple[str, ...]]:
    relations = [str(r) for r in rng.permutation(list(HALF_RELATIONS + EXTREME_RELATIONS))]
    base = (target.color, target.kind)
    sized = (target.size, target.color, target.kind)
    candidates = [base, sized]
    candidates += [base + (r,) for r in relations]
    candidates += [sized + (r,) for r in relations]
    return candidates


# ============================================================
# Scene generation
# ============================================================

def _random_attributes(
    rng: np.random.Generator,
    cfg: SceneConfig,
    like: Optional[Shape],
) -> tuple[str, str, str]:
    kind = str(rng.choice(cfg.shape_kinds))
    color = str(rng.choice(cfg.palette))
    size = str(rng.choice(["small", "big"]))
    if like is not None:
        mode = _DISTRACTOR_MODES[int(rng.integers(len(_DISTRACTOR_MODES)))]
        if mode in ("same_kind", "same_both"):
            kind = like.kind
        if mode in ("same_color", "same_both"):
            color = like.color
    return kind, color, size


def _place_shapes(rng: np.random.Generator, cfg: SceneConfig) -> Optional[list[Shape]]:
    size = cfg.image_size
    count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    ranges = {
        "small": radius_range(cfg.small_radius, size),
        "big": radius_range(cfg.big_radius, size),
    }
    shapes: list[Shape] = []
    for _ in range(count):
        kind, color, size_word = _random_attributes(rng, cfg, shapes[0] if shapes else None)
        low, high = ranges[size_word]
        radius = int(rng.integers(low, high + 1))
        if 2 * radius >= size:
            return None
        for _ in range(PLACEMENT_TRIES):
            cx = int(rng.integers(radius, size - radius + 1))
            cy = int(rng.integers(radius, size - radius + 1))
            if all(
                abs(cx - other.cx) >= radius + other.radius + PLACEMENT_MARGIN
                or abs(cy - other.cy) >= radius + other.radius + PLACEMENT_MARGIN
                for other in shapes
            ):
                shapes.append(Shape(kind, color, size_word, cx, cy, radius))
                break
        else:
            return None
    return shapes


def generate_scene(seed: int, cfg: SceneConfig) -> Scene:
    """
    Generate the shapes, target and caption words for a seed.

    Scenes whose target cannot be described uniquely are rejected and
    resampled from the same stream.

    Raises:
        DataGenerationError: After ``cfg.max_rejections`` rejected scenes
    """
    rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))
    for _ in range(cfg.max_rejections):
        shapes = _place_shapes(rng, cfg)
        if shapes is None:
            continue
        # The first placed shape is the target; shuffle so its index carries no signal.
        order = rng.permutation(len(shapes))
        shapes = [shapes[i] for i in order]
        target = int(np.where(order == 0)[0][0])
        for words in _caption_candidates(shapes[target], rng):
            if caption_referents(words, shapes, cfg.image_size) == [target]:
                return Scene(tuple(shapes), target, ("the",) + words)
    raise DataGenerationError(seed=seed, rejections=cfg.max_rejections)


def render_silhouette(shape: Shape, image_size: int) -> np.ndarray:
    """Boolean H×W mask of a shape, sampled at pixel centres."""
    coords = np.arange(image_size, dtype=np.float64) + 0.5
    px = coords[None, :] - shape.cx
    py = coords[:, None] - shape.cy
    r = shape.radius
    if shape.kind == "circle":
        return px ** 2 + py ** 2 <= r ** 2
    if shape.kind == "square":
        return (np.abs(px) <= r) & (np.abs(py) <= r)
    # Triangle: apex at (cx, cy - r), base on y = cy + r with half-width r.
    return (py >= -r) & (py <= r) & (np.abs(px) <= (py + r) / 2)


def mask_to_box(mask: np.ndarray) -> np.ndarray:
    """Tight box (x_min, y_min, x_max, y_max) of a boolean H×W mask, max edges exclusive."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise OutOfRangeError("mask pixel count", 0, "> 0")
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float32)


def render_scene(scene: Scene, cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Render (image 3×H×W float32, target mask H×W bool)."""
    size = cfg.image_size
    image = np.empty((3, size, size), dtype=np.float32)
    image[:] = np.asarray(cfg.background, dtype=np.float32)[:, None, None]
    target_mask = np.zeros((size, size), dtype=bool)
    for index, shape in enumerate(scene.shapes):
        silhouette = render_silhouette(shape, size)
        rgb = np.asarray(COLOR_TABLE[shape.color], dtype=np.float32)
        image[:, silhouette] = rgb[:, None]
        if index == scene.target:
            target_mask = silhouette
    return image, target_mask


def generate_sample(seed: int, cfg: SceneConfig, vocab: Optional[Vocab] = None) -> Sample:
    """
    Generate one deterministic sample.

    Args:
        seed: 64-bit generation seed, also used as sample_id
        cfg: Scene parameters
        vocab: Token table (built from cfg when omitted)

    Returns:
        Sample whose caption refers to exactly one rendered shape

    Raises:
        DataGenerationError: If no unambiguous scene is found
    """
    vocab = vocab or cfg.vocab()
    scene = generate_scene(seed, cfg)
    image, mask = render_scene(scene, cfg)
    caption = vocab.encode(list(scene.words), cfg.caption_len)
    return Sample(
        image=torch.from_numpy(image),
        caption=torch.tensor(caption, dtype=torch.int64),
        mask=torch.from_numpy(mask.astype(np.float32))[None],
        box=torch.from_numpy(mask_to_box(mask)),
        sample_id=int(seed),
    )


def generate_split(corpus: CorpusConfig, split: str) -> Iterator[Sample]:
    """Yield the samples of a split in sample-id order."""
    start, stop = corpus.split_ranges()[split]
    vocab = corpus.scene.vocab()
    ids = range(start, stop)
    if settings.PROGRESS_BARS:
        ids = tqdm(ids, desc=f"gen {split}", leave=False)
    for sample_id in ids:
        yield generate_sample(sample_id, corpus.scene, vocab)


# ============================================================
# Dataset file format
# ============================================================

def record_size(image_size: int, caption_len: int) -> int:
    pixels = image_size * image_size
    return 3 * pixels * 4 + pixels + 2 * caption_len + 4 * 4 + 8


def _pack_record(sample: Sample) -> bytes:
    mask = sample.mask.reshape(-1).numpy()
    return b"".join((
        sample.image.numpy().astype("<f4").tobytes(),
        (mask > 0.5).astype(np.uint8).tobytes(),
        sample.caption.numpy().astype("<u2").tobytes(),
        sample.box.numpy().astype("<f4").tobytes(),
        np.array([sample.sample_id], dtype="<u8").tobytes(),
    ))


def _unpack_record(buf: bytes, image_size: int, caption_len: int) -> Sample:
    pixels = image_size * image_size
    offset = 0
    image = np.frombuffer(buf, dtype="<f4", count=3 * pixels, offset=offset)
    offset += 3 * pixels * 4
    mask = np.frombuffer(buf, dtype=np.uint8, count=pixels, offset=offset)
    offset += pixels
    caption = np.frombuffer(buf, dtype="<u2", count=caption_len, offset=offset)
    offset += 2 * caption_len
    box = np.frombuffer(buf, dtype="<f4", count=4, offset=offset)
    offset += 16
    sample_id = int(np.frombuffer(buf, dtype="<u8", count=1, offset=offset)[0])
    return Sample(
        image=torch.from_numpy(image.astype(np.float32).reshape(3, image_size, image_size)),
        caption=torch.from_numpy(caption.astype(np.int64)),
        mask=torch.from_numpy(mask.astype(np.float32).reshape(1, image_size, image_size)),
        box=torch.from_numpy(box.astype(np.float32)),
        sample_id=sample_id,
    )


def manifest_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def write_dataset(
    samples: Iterable[Sample],
    path: str | Path,
    corpus: CorpusConfig,
    split: str = "all",
    config_hash: str = "",
) -> DatasetManifest:
    """
    Write samples to a dataset file plus its JSON sidecar manifest.

    Args:
        samples: Samples in the order they should be read back
        path: Destination file
        corpus: Corpus configuration (image size, caption length, splits)
        split: Split name recorded in the manifest
        config_hash: Hash of the corpus section

    Returns:
        The manifest written next to the file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scene = corpus.scene
    expected = record_size(scene.image_size, scene.caption_len)
    count = 0
    first_id: Optional[int] = None
    last_id = -1

    with open(path, "wb") as handle:
        handle.write(HEADER.pack(MAGIC, DATASET_FORMAT_VERSION, 0, scene.image_size, scene.caption_len))
        for sample in samples:
            record = _pack_record(sample)
            if len(record) != expected:
                raise DatasetFormatError(
                    str(path),
                    f"Sample {sample.sample_id} does not match image_size/caption_len",
                    details={"record_bytes": len(record), "expected_bytes": expected},
                )
            handle.write(record)
            first_id = sample.sample_id if first_id is None else first_id
            last_id = sample.sample_id
            count += 1
        handle.seek(0)
        handle.write(HEADER.pack(MAGIC, DATASET_FORMAT_VERSION, count, scene.image_size, scene.caption_len))

    start = first_id if first_id is not None else 0
    manifest = DatasetManifest(
        split=split,
        count=count,
        image_size=scene.image_size,
        caption_len=scene.caption_len,
        id_range=(start, last_id + 1 if count else start),
        splits=corpus.split_ranges(),
        corpus=corpus.model_dump(mode="json"),
        config_hash=config_hash,
        digest=file_sha256(path),
    )
    manifest_path(path).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Dataset written", extra={"path": str(path), "split": split, "count": count})
    return manifest


def read_manifest(path: str | Path) -> DatasetManifest:
    return DatasetManifest.model_validate(json.loads(manifest_path(path).read_text(encoding="utf-8")))


def read_dataset(path: str | Path) -> Iterator[Sample]:
    """
    Open a dataset file and return an iterator over its samples.

    The header and total file size are validated before the iterator is
    returned, so a corrupt file yields no partial data.

    Raises:
        BadMagicError: If the file does not start with ``DPDS``
        VersionMismatchError: If the format version differs
        TruncatedRecordError: If the file is shorter than its declared records
        DatasetFormatError: For trailing bytes
    """
    path = Path(path)
    with open(path, "rb") as handle:
        head = handle.read(HEADER.size)
    if len(head) < HEADER.size:
        if not MAGIC.startswith(head[:4]):
            raise BadMagicError(str(path), head[:4])
        raise TruncatedRecordError(str(path), HEADER.size, len(head))

    magic, version, count, image_size, caption_len = HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagicError(str(path), magic)
    if version != DATASET_FORMAT_VERSION:
        raise VersionMismatchError(str(path), version, DATASET_FORMAT_VERSION)

    size = record_size(image_size, caption_len)
    expected = HEADER.size + count * size
    actual = path.stat().st_size
    if actual < expected:
        raise TruncatedRecordError(str(path), expected, actual)
    if actual > expected:
        raise DatasetFormatError(
            str(path),
            "Dataset file has trailing bytes after its declared records",
            details={"expected_bytes": expected, "actual_bytes": actual},
        )
    return _iter_records(path, count, image_size, caption_len, size)


def _iter_records(path: Path, count: int, image_size: int, caption_len: int, size: int) -> Iterator[Sample]:
    with open(path, "rb") as handle:
        handle.seek(HEADER.size)
        for _ in range(count):
            yield _unpack_record(handle.read(size), image_size, caption_len)


# ============================================================
# Tensor datasets
# ============================================================

class SampleDataset(Dataset):
    """In-memory split held as stacked tensors."""

    def __init__(self, samples: Iterable[Sample], name: str = "split") -> None:
        samples = list(samples)
        self.name = name
        if samples:
            batch = collate_samples(samples)
            self.images, self.captions = batch.images, batch.captions
            self.masks, self.boxes = batch.masks, batch.boxes
        self.sample_ids = [s.sample_id for s in samples]

    @classmethod
    def from_file(cls, path: str | Path, name: Optional[str] = None) -> "SampleDataset":
        return cls(read_dataset(path), name=name or Path(path).stem)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __getitem__(self, index: int) -> Sample:
        return Sample(
            image=self.images[index],
            caption=self.captions[index],
            mask=self.masks[index],
            box=self.boxes[index],
            sample_id=self.sample_ids[index],
        )

    def batch(self, indices: list[int] | range) -> SampleBatch:
        indices = list(indices)
        return SampleBatch(
            images=self.images[indices],
            captions=self.captions[indices],
            masks=self.masks[indices],
            boxes=self.boxes[indices],
            sample_ids=[self.sample_ids[i] for i in indices],
        )

    def batches(
        self,
        batch_size: int,
        shuffle: bool = False,
        generator: Optional[torch.Generator] = None,
    ) -> Iterator[SampleBatch]:
        """Yield batches; shuffling draws only from ``generator``."""
        if shuffle:
            order = torch.randperm(len(self), generator=generator).tolist()
        else:
            order = list(range(len(self)))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])
