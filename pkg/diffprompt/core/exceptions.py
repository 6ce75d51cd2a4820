"""
Custom exceptions for the Diff-Prompt pipeline.

This module provides the exception hierarchy for every failure the
pipeline reports: configuration and shape contracts, dataset and
checkpoint formats, stage dependencies, provenance and the freeze
contract. Each exception carries an error code, structured details and a
process exit code for the CLI.

Python 3.13 Compatible.
"""

from __future__ import annotations

import logging
import traceback
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Optional
from uuid import uuid4

logger = logging.getLogger(__name__)


class ErrorCode(str, Enum):
    """Standardized error codes for CLI and report output."""

    # Configuration & validation (1xxx)
    CONFIG_INVALID = "CFG_1001"
    VALIDATION_SHAPE_MISMATCH = "VAL_1101"
    VALIDATION_OUT_OF_RANGE = "VAL_1102"

    # Data (2xxx)
    DATA_GENERATION_FAILED = "DAT_2001"
    DATA_FORMAT_INVALID = "DAT_2002"
    DATA_BAD_MAGIC = "DAT_2003"
    DATA_VERSION_MISMATCH = "DAT_2004"
    DATA_TRUNCATED = "DAT_2005"
    DATA_EMPTY_SPLIT = "DAT_2006"

    # Checkpoints (3xxx)
    CHECKPOINT_ERROR = "CKP_3001"
    CHECKPOINT_CORRUPT = "CKP_3002"

    # Pipeline (4xxx)
    PIPELINE_MISSING_DEPENDENCY = "PIP_4001"
    PIPELINE_PROVENANCE_MISMATCH = "PIP_4002"

    # Training (5xxx)
    TRAINING_FREEZE_VIOLATION = "TRN_5001"
    TRAINING_DIVERGED = "TRN_5002"

    # Internal (9xxx)
    INTERNAL_ERROR = "INT_9001"
    INTERNAL_UNEXPECTED = "INT_9002"


class DiffPromptException(Exception):
    """
    Base exception class for all pipeline errors.

    Provides consistent error handling with:
    - Error codes for identification in logs and reports
    - Detailed error context
    - Process exit code mapping for the CLI
    - Structured logging

    Attributes:
        message: Human-readable error message
        error_code: Standardized error code from ErrorCode enum
        exit_code: Process exit code used by the CLI
        details: Additional error context
        correlation_id: Unique ID for tracing
        timestamp: When the error occurred
    """

    def __init__(
        self,
        message: str,
        error_code: ErrorCode = ErrorCode.INTERNAL_ERROR,
        exit_code: int = 1,
        details: Optional[dict[str, Any]] = None,
        correlation_id: Optional[str] = None,
        cause: Optional[Exception] = None
    ) -> None:
        self.message = message
        self.error_code = error_code
        self.exit_code = exit_code
        self.details = details or {}
        self.correlation_id = correlation_id or str(uuid4())
        self.timestamp = datetime.now(timezone.utc)
        self.cause = cause

        self._log_exception()

        super().__init__(self.message)

    def _log_exception(self) -> None:
        """Log the exception with context."""
        log_data = {
            "error_code": self.error_code.value,
            "message": self.message,
            "correlation_id": self.correlation_id,
            "details": self.details,
        }

        if self.cause:
            log_data["cause"] = str(self.cause)
            log_data["traceback"] = "".join(traceback.format_exception(self.cause))

        if self.exit_code == 1:
            logger.error(f"DiffPromptException: {log_data}")
        else:
            logger.warning(f"DiffPromptException: {log_data}")

    def to_dict(self) -> dict[str, Any]:
        """Convert exception to dictionary for JSON output."""
        return {
            "success": False,
            "error": {
                "code": self.error_code.value,
                "message": self.message,
                "details": self.details,
                "correlation_id": self.correlation_id,
                "timestamp": self.timestamp.isoformat()
            }
        }


# ============================================================
# Configuration & Validation Exceptions
# ============================================================

class ConfigurationError(DiffPromptException):
    """Raised when a configuration value violates its contract."""

    def __init__(
        self,
        message: str,
        field: Optional[str] = None,
        value: Optional[Any] = None,
        details: Optional[dict[str, Any]] = None
    ) -> None:
        error_details = details or {}
        if field:
            error_details["field"] = field
        if value is not None:
            error_details["invalid_value"] = str(value)[:100]

        super().__init__(
            message=message,
            error_code=ErrorCode.CONFIG_INVALID,
            exit_code=2,
            details=error_details
        )


class ShapeMismatchError(DiffPromptException):
    """Raised when a tensor violates a shape or divisibility contract."""

    def __init__(
        self,
        what: str,
        expected: Any,
        actual: Any
    ) -> None:
        super().__init__(
            message=f"{what}: expected shape {expected}, got {actual}",
            error_code=ErrorCode.VALIDATION_SHAPE_MISMATCH,
            exit_code=2,
            details={"what": what, "expected": str(expected), "actual": str(actual)}
        )


class OutOfRangeError(DiffPromptException):
    """Raised when an index, timestep or coordinate lies outside its domain."""

    def __init__(self, what: str, value: Any, allowed: str) -> None:
        super().__init__(
            message=f"{what}={value} outside allowed range {allowed}",
            error_code=ErrorCode.VALIDATION_OUT_OF_RANGE,
            exit_code=2,
            details={"what": what, "value": str(value), "allowed": allowed}
        )


# ============================================================
# Data Exceptions
# ============================================================

class DataGenerationError(DiffPromptException):
    """Raised when scene generation keeps producing ambiguous scenes."""

    def __init__(self, seed: int, rejections: int) -> None:
        super().__init__(
            message=f"Scene generation for seed {seed} failed after {rejections} rejections",
            error_code=ErrorCode.DATA_GENERATION_FAILED,
            exit_code=1,
            details={"seed": seed, "rejections": rejections}
        )


class DatasetFormatError(DiffPromptException):
    """Base class for dataset file format errors."""

    def __init__(
        self,
        path: str,
        message: str,
        error_code: ErrorCode = ErrorCode.DATA_FORMAT_INVALID,
        details: Optional[dict[str, Any]] = None
    ) -> None:
        error_details = {"path": path}
        if details:
            error_details.update(details)

        super().__init__(
            message=message,
            error_code=error_code,
            exit_code=2,
            details=error_details
        )


class BadMagicError(DatasetFormatError):
    """Raised when a dataset file does not start with the expected magic."""

    def __init__(self, path: str, found: bytes) -> None:
        super().__init__(
            path=path,
            message=f"Not a dataset file (magic {found!r})",
            error_code=ErrorCode.DATA_BAD_MAGIC,
            details={"found": found.hex()}
        )


class VersionMismatchError(DatasetFormatError):
    """Raised when a dataset file was written by another format version."""

    def __init__(self, path: str, found: int, expected: int) -> None:
        super().__init__(
            path=path,
            message=f"Dataset format version {found} is not supported (expected {expected})",
            error_code=ErrorCode.DATA_VERSION_MISMATCH,
            details={"found": found, "expected": expected}
        )


class TruncatedRecordError(DatasetFormatError):
    """Raised when a dataset file ends before its declared record count."""

    def __init__(self, path: str, expected_bytes: int, actual_bytes: int) -> None:
        super().__init__(
            path=path,
            message=f"Dataset file truncated: expected {expected_bytes} bytes, found {actual_bytes}",
            error_code=ErrorCode.DATA_TRUNCATED,
            details={"expected_bytes": expected_bytes, "actual_bytes": actual_bytes}
        )


class EmptySplitError(DiffPromptException):
    """Raised when evaluation is asked to run over no samples."""

    def __init__(self, split: str = "split") -> None:
        super().__init__(
            message=f"Cannot evaluate an empty {split}",
            error_code=ErrorCode.DATA_EMPTY_SPLIT,
            exit_code=2,
            details={"split": split}
        )


# ============================================================
# Checkpoint Exceptions
# ============================================================

class CheckpointError(DiffPromptException):
    """Base class for checkpoint read/write errors."""

    def __init__(
        self,
        path: str,
        message: str,
        error_code: ErrorCode = ErrorCode.CHECKPOINT_ERROR,
        details: Optional[dict[str, Any]] = None,
        cause: Optional[Exception] = None
    ) -> None:
        error_details = {"path": path}
        if details:
            error_details.update(details)

        super().__init__(
            message=message,
            error_code=error_code,
            exit_code=2,
            details=error_details,
            cause=cause
        )


class CheckpointCorruptError(CheckpointError):
    """Raised when a checkpoint manifest disagrees with its tensor blob."""

    def __init__(self, path: str, reason: str) -> None:
        super().__init__(
            path=path,
            message=f"Checkpoint is corrupt: {reason}",
            error_code=ErrorCode.CHECKPOINT_CORRUPT,
            details={"reason": reason}
        )


# ============================================================
# Pipeline Exceptions
# ============================================================

class MissingDependencyError(DiffPromptException):
    """Raised when a stage runs before the stage producing its inputs."""

    def __init__(self, stage: str, missing_stage: str, path: str) -> None:
        super().__init__(
            message=f"'{stage}' needs the output of '{missing_stage}' (missing {path})",
            error_code=ErrorCode.PIPELINE_MISSING_DEPENDENCY,
            exit_code=3,
            details={"stage": stage, "missing_stage": missing_stage, "path": path}
        )


class ProvenanceError(DiffPromptException):
    """Raised when artifacts were produced under a different config or upstream."""

    def __init__(self, component: str, reason: str, expected: str, found: str) -> None:
        super().__init__(
            message=f"Provenance mismatch for '{component}': {reason}",
            error_code=ErrorCode.PIPELINE_PROVENANCE_MISMATCH,
            exit_code=3,
            details={"component": component, "expected": expected, "found": found}
        )


# ============================================================
# Training Exceptions
# ============================================================

class FreezeViolationError(DiffPromptException):
    """Raised when a frozen module is trainable or receives a gradient."""

    def __init__(self, component: str, parameters: list[str]) -> None:
        super().__init__(
            message=f"Frozen component '{component}' has trainable or gradient-carrying parameters",
            error_code=ErrorCode.TRAINING_FREEZE_VIOLATION,
            exit_code=1,
            details={"component": component, "parameters": parameters[:10]}
        )


class TrainingDivergenceError(DiffPromptException):
    """Raised when a training loss becomes NaN or infinite."""

    def __init__(self, stage: str, step: int) -> None:
        super().__init__(
            message=f"Stage '{stage}' diverged at step {step}",
            error_code=ErrorCode.TRAINING_DIVERGED,
            exit_code=1,
            details={"stage": stage, "step": step}
        )
