"""
Pytest configuration and fixtures.

Provides a tiny run configuration, in-memory splits and freshly built
models for unit tests, and a generated on-disk run directory for
integration tests.
"""

import logging
from pathlib import Path
from typing import Any

import pytest
import torch

from diffprompt.core.logging import configure_logging
from diffprompt.schemas.config import RunConfig
from diffprompt.services.base_service import RunPaths
from diffprompt.services.checkpoint_service import freeze
from diffprompt.services.data_service import SampleDataset, generate_split
from diffprompt.services.generator_service import build_dit, build_schedule
from diffprompt.services.grounder_service import build_grounder
from diffprompt.services.pipeline_service import generate_data
from diffprompt.services.prompting_service import PromptedBundle, build_tuner, select_steps
from diffprompt.services.vae_service import build_vae

configure_logging("WARNING")
logging.getLogger("diffprompt").setLevel(logging.WARNING)


TINY_CONFIG: dict[str, Any] = {
    "seed": 7,
    "corpus": {
        "scene": {"image_size": 32, "caption_len": 8},
        "train_size": 24,
        "val_size": 8,
        "test_size": 4,
    },
    "grounder": {"patch_size": 8, "width": 16, "depth": 2, "num_heads": 2, "anchor_scales": [8.0, 14.0, 24.0]},
    "vae": {"channels": [4, 8, 8]},
    "dit": {"patch_size": 2, "hidden_size": 32, "depth": 1, "num_heads": 2, "frequency_embedding_size": 32},
    "diffusion": {"T_forward": 20, "T_sample": 5},
    "prompt": {"depth": 2, "n_prompts": 2, "n_global": 2, "adapter_channels": [2, 4, 4]},
    "stage0": {"epochs": 1, "batch_size": 8, "lr": 1e-3},
    "stage1": {"epochs": 1, "batch_size": 8, "lr": 1e-3},
    "stage2": {"epochs": 1, "batch_size": 8, "lr": 1e-3},
    "stage3": {"epochs": 1, "batch_size": 8, "lr": 1e-3},
    "eval_batch_size": 8,
    "device": "cpu",
}


def make_config(out_dir: Path | str = "runs/test", **changes: Any) -> RunConfig:
    """Tiny validated config; nested ``changes`` merge into the tiny sections."""
    cfg = RunConfig.parse_dict({**TINY_CONFIG, "out_dir": str(out_dir)})
    return cfg.updated(**changes) if changes else cfg


@pytest.fixture(autouse=True)
def _seed_torch():
    """Seed the global torch RNG so module initialization is reproducible."""
    torch.manual_seed(0)


@pytest.fixture(scope="function")
def tiny_config(tmp_path: Path) -> RunConfig:
    """Tiny run configuration writing under a temporary directory."""
    return make_config(tmp_path / "run")


@pytest.fixture(scope="session")
def session_config() -> RunConfig:
    """Tiny run configuration shared by session-scoped fixtures."""
    return make_config()


@pytest.fixture(scope="session")
def train_split(session_config: RunConfig) -> SampleDataset:
    """In-memory training split of the tiny corpus."""
    return SampleDataset(generate_split(session_config.corpus, "train"), name="train")


@pytest.fixture(scope="session")
def val_split(session_config: RunConfig) -> SampleDataset:
    """In-memory validation split of the tiny corpus."""
    return SampleDataset(generate_split(session_config.corpus, "val"), name="val")


@pytest.fixture(scope="function")
def grounder(session_config: RunConfig):
    """Untrained tiny grounder."""
    return build_grounder(session_config)


@pytest.fixture(scope="function")
def bundle(session_config: RunConfig) -> PromptedBundle:
    """Untrained tiny prompted bundle with frozen grounder, VAE and generator."""
    cfg = session_config
    return PromptedBundle(
        grounder=freeze(build_grounder(cfg)),
        vae=freeze(build_vae(cfg)),
        generator=freeze(build_dit(cfg)),
        tuner=build_tuner(cfg),
        sched=build_schedule(cfg),
        assignment=select_steps(cfg.prompt.strategy, cfg.prompt.depth, cfg.diffusion.T_sample),
        T_sample=cfg.diffusion.T_sample,
    )


@pytest.fixture(scope="function")
def run_dir(tiny_config: RunConfig) -> RunPaths:
    """Run directory with every split generated on disk."""
    paths = RunPaths.from_config(tiny_config)
    generate_data(tiny_config, paths)
    return paths
