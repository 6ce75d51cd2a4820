"""
Single-file checkpoints and provenance checks.

Layout: u64 little-endian manifest length, UTF-8 JSON manifest, then every
tensor as little-endian f32, concatenated in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import torch
import torch.nn as nn
from pydantic import ValidationError

from diffprompt.core.exceptions import (
    CheckpointCorruptError,
    CheckpointError,
    FreezeViolationError,
    ProvenanceError,
)
from diffprompt.schemas.checkpoint import CHECKPOINT_FORMAT_VERSION, CheckpointManifest, TensorEntry
from diffprompt.schemas.config import RunConfig

logger = logging.getLogger(__name__)

_LENGTH = struct.Struct("<Q")

# Config sections that define each component; a change in any of them
# invalidates the checkpoint.
COMPONENT_SECTIONS: dict[str, tuple[str, ...]] = {
    "grounder": ("seed", "corpus", "grounder", "stage0"),
    "mask_vae": ("seed", "corpus", "vae", "stage1"),
    "prompt_generator": ("seed", "corpus", "grounder", "vae", "dit", "diffusion", "stage2"),
    "prompt_adapters": ("seed", "corpus", "grounder", "vae", "dit", "diffusion", "prompt", "stage3"),
}

# Upstream artifacts whose digests each component records.
COMPONENT_UPSTREAM: dict[str, tuple[str, ...]] = {
    "grounder": ("dataset",),
    "mask_vae": ("dataset",),
    "prompt_generator": ("grounder", "mask_vae"),
    "prompt_adapters": ("grounder", "mask_vae", "prompt_generator"),
}


def component_hash(cfg: RunConfig, component: str, extra: Optional[Mapping[str, Any]] = None) -> str:
    """Hash of the config sections defining ``component`` (plus optional extra fields)."""
    sections = COMPONENT_SECTIONS.get(component, ("seed", "corpus", "grounder", "stage3"))
    base = cfg.section_hash(*sections)
    if not extra:
        return base
    payload = json.dumps({"sections": base, "extra": dict(extra)}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def state_digest(module: nn.Module) -> str:
    """SHA-256 over parameter and buffer bytes in state_dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    """Disable gradients on every parameter and switch to eval mode."""
    for param in module.parameters():
        param.requires_grad_(False)
    return module.eval()


def assert_frozen(module: nn.Module, component: str) -> None:
    """
    Raises:
        FreezeViolationError: If any parameter is trainable or holds a gradient
    """
    offenders = [
        name for name, param in module.named_parameters()
        if param.requires_grad or param.grad is not None
    ]
    if offenders:
        raise FreezeViolationError(component, offenders)


# ============================================================
# Write / read
# ============================================================

def save_checkpoint(
    path: str | Path,
    component: str,
    state: nn.Module | Mapping[str, torch.Tensor],
    config_hash: str,
    upstream: Optional[Mapping[str, str]] = None,
    metadata: Optional[Mapping[str, Any]] = None,
    run_config_hash: str = "",
) -> str:
    """
    Write a checkpoint and return its digest (SHA-256 of the file).

    Args:
        path: Destination file
        component: Component name (grounder, mask_vae, prompt_generator, prompt_adapters)
        state: Module or name -> tensor mapping
        config_hash: Hash of the component's config sections
        upstream: Upstream component -> digest
        metadata: Extra JSON-serializable fields
        run_config_hash: Hash of the full run configuration
    """
    tensors = state.state_dict() if isinstance(state, nn.Module) else dict(state)
    manifest = CheckpointManifest(
        format_version=CHECKPOINT_FORMAT_VERSION,
        component=component,
        tensors=[TensorEntry(name=name, shape=list(t.shape)) for name, t in tensors.items()],
        config_hash=config_hash,
        run_config_hash=run_config_hash,
        upstream=dict(upstream or {}),
        metadata=dict(metadata or {}),
    )
    header = manifest.model_dump_json().encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(_LENGTH.pack(len(header)))
        handle.write(header)
        for tensor in tensors.values():
            handle.write(tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())

    digest = file_sha256(path)
    logger.info("Checkpoint written", extra={"component": component, "path": str(path), "digest": digest[:12]})
    return digest


def read_manifest(path: str | Path) -> CheckpointManifest:
    manifest, _ = _read(path, with_tensors=False)
    return manifest


def load_checkpoint(path: str | Path) -> tuple[CheckpointManifest, dict[str, torch.Tensor]]:
    """
    Read a checkpoint.

    Raises:
        CheckpointError: If the file cannot be read
        CheckpointCorruptError: If the manifest is invalid or disagrees with the blob
    """
    return _read(path, with_tensors=True)


def _read(path: str | Path, with_tensors: bool) -> tuple[CheckpointManifest, dict[str, torch.Tensor]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(str(path), f"Cannot read checkpoint: {e}", cause=e)

    if len(data) < _LENGTH.size:
        raise CheckpointCorruptError(str(path), "missing manifest length")
    (length,) = _LENGTH.unpack_from(data)
    start = _LENGTH.size + length
    if start > len(data):
        raise CheckpointCorruptError(str(path), "manifest extends past end of file")
    try:
        manifest = CheckpointManifest.model_validate(json.loads(data[_LENGTH.size:start].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as e:
        raise CheckpointCorruptError(str(path), f"unreadable manifest ({type(e).__name__})")
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointCorruptError(str(path), f"format version {manifest.format_version}")
    if len(data) - start != manifest.blob_bytes:
        raise CheckpointCorruptError(
            str(path), f"blob has {len(data) - start} bytes, manifest declares {manifest.blob_bytes}"
        )

    tensors: dict[str, torch.Tensor] = {}
    if with_tensors:
        offset = start
        for entry in manifest.tensors:
            values = np.frombuffer(data, dtype="<f4", count=entry.numel, offset=offset)
            tensors[entry.name] = torch.from_numpy(values.astype(np.float32).reshape(entry.shape))
            offset += 4 * entry.numel
    return manifest, tensors


def load_into(module: nn.Module, path: str | Path) -> CheckpointManifest:
    """Load a checkpoint into ``module`` (strict names and shapes)."""
    manifest, tensors = load_checkpoint(path)
    try:
        module.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise CheckpointCorruptError(str(path), f"does not fit {type(module).__name__}: {e}")
    return manifest


# ============================================================
# Provenance
# ============================================================

def verify_provenance(
    manifest: CheckpointManifest,
    expected_hash: str,
    upstream: Optional[Mapping[str, str]] = None,
) -> None:
    """
    Check that a checkpoint was produced by this configuration and these inputs.

    Raises:
        ProvenanceError: On a config-hash or upstream-digest mismatch
    """
    if manifest.config_hash != expected_hash:
        raise ProvenanceError(manifest.component, "config hash differs", expected_hash, manifest.config_hash)
    for name, digest in (upstream or {}).items():
        recorded = manifest.upstream.get(name)
        if recorded != digest:
            raise ProvenanceError(
                manifest.component, f"upstream '{name}' digest differs", digest, str(recorded)
            )
