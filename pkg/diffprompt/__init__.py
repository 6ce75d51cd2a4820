"""Desk-scale diffusion-generated prompt tuning for visual grounding."""

__version__ = "1.0.0"
