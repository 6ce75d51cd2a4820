"""
Service layer for the diffprompt pipeline.

Services follow these patterns:
- Module-level operations on models and tensors
- One StageService subclass per training stage (load upstream, train, save, report)
- Provenance-checked checkpoints between stages

Python 3.13 Compatible.
"""

from diffprompt.services.base_service import RunPaths, StageService
from diffprompt.services.pipeline_service import run_command

__all__ = ["RunPaths", "StageService", "run_command"]
