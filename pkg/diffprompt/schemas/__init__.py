"""Pydantic schemas for run configuration, checkpoints and reports."""

from diffprompt.schemas.checkpoint import CheckpointManifest, DatasetManifest, TensorEntry
from diffprompt.schemas.config import (
    CorpusConfig,
    DiffusionConfig,
    DitConfig,
    GrounderConfig,
    PromptConfig,
    RunConfig,
    SceneConfig,
    StageConfig,
    VaeConfig,
    Vocab,
)
from diffprompt.schemas.report import (
    AblationReport,
    AblationRow,
    CategoryMetrics,
    ComplexityRow,
    ComplexityTable,
    EvalReport,
    StageReport,
)

__all__ = [
    "CheckpointManifest",
    "DatasetManifest",
    "TensorEntry",
    "CorpusConfig",
    "DiffusionConfig",
    "DitConfig",
    "GrounderConfig",
    "PromptConfig",
    "RunConfig",
    "SceneConfig",
    "StageConfig",
    "VaeConfig",
    "Vocab",
    "AblationReport",
    "AblationRow",
    "CategoryMetrics",
    "ComplexityRow",
    "ComplexityTable",
    "EvalReport",
    "StageReport",
]
