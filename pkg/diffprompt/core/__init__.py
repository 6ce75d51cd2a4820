"""
Core module for the diffprompt pipeline.

This module exports:
- Process settings
- Exception classes
- Logging configuration
- Named-seed derivation

Python 3.13 Compatible.
"""

from diffprompt.core.config import settings, Settings
from diffprompt.core.exceptions import (
    # Base
    DiffPromptException,
    ErrorCode,

    # Configuration & validation
    ConfigurationError,
    ShapeMismatchError,
    OutOfRangeError,

    # Data
    DataGenerationError,
    DatasetFormatError,
    BadMagicError,
    VersionMismatchError,
    TruncatedRecordError,
    EmptySplitError,

    # Checkpoints
    CheckpointError,
    CheckpointCorruptError,

    # Pipeline
    MissingDependencyError,
    ProvenanceError,

    # Training
    FreezeViolationError,
    TrainingDivergenceError,
)
from diffprompt.core.logging import configure_logging, get_logger, LoggerMixin
from diffprompt.core.seeding import derive_seed, seeded_randn, torch_generator

__all__ = [
    "settings",
    "Settings",
    "DiffPromptException",
    "ErrorCode",
    "ConfigurationError",
    "ShapeMismatchError",
    "OutOfRangeError",
    "DataGenerationError",
    "DatasetFormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedRecordError",
    "EmptySplitError",
    "CheckpointError",
    "CheckpointCorruptError",
    "MissingDependencyError",
    "ProvenanceError",
    "FreezeViolationError",
    "TrainingDivergenceError",
    "configure_logging",
    "get_logger",
    "LoggerMixin",
    "derive_seed",
    "seeded_randn",
    "torch_generator",
]
