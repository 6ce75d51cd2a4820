"""Named-seed derivation; every random stream in the pipeline starts here."""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np
import torch

from diffprompt.core.exceptions import ShapeMismatchError

SeedPart = Union[int, str]

_U64 = (1 << 64) - 1


def _as_entropy(part: SeedPart) -> int:
    if isinstance(part, str):
        return int.from_bytes(hashlib.sha256(part.encode("utf-8")).digest()[:8], "little")
    return int(part) & _U64


def derive_seed(base: int, *names: SeedPart) -> int:
    """
    Derive a 63-bit seed from a base seed and a path of names.

    The same (base, names) always yields the same seed; distinct name paths
    yield independent streams.

    Args:
        base: Base seed of the run
        names: Stage names, sample ids, epochs, ...

    Returns:
        Seed usable by both numpy and torch generators
    """
    entropy = [_as_entropy(base)] + [_as_entropy(n) for n in names]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(state[0]) | (int(state[1]) << 32)) & ((1 << 63) - 1)


def torch_generator(seed: int, device: str | torch.device = "cpu") -> torch.Generator:
    """Return a torch generator seeded with ``seed``."""
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed) & ((1 << 63) - 1))
    return generator


def seeded_randn(
    shape: tuple[int, ...],
    seeds: int | list[int],
    dtype: torch.dtype = torch.float32,
    device: str | torch.device = "cpu",
) -> torch.Tensor:
    """
    Draw standard normal noise, one independent stream per batch row.

    With a list of seeds, row ``i`` depends only on ``seeds[i]`` so results do
    not change with batch composition.
    """
    if isinstance(seeds, int):
        return torch.randn(shape, generator=torch_generator(seeds), dtype=dtype).to(device)
    if len(seeds) != shape[0]:
        raise ShapeMismatchError("per-row seeds", shape[0], len(seeds))
    rows = [
        torch.randn(shape[1:], generator=torch_generator(s), dtype=dtype)
        for s in seeds
    ]
    return torch.stack(rows).to(device)
