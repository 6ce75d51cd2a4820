"""Neural network modules: grounder, mask VAE, DiT and prompt adapters."""

from diffprompt.models.dit import Condition, DitModel
from diffprompt.models.grounder import GrounderFeatures, GrounderModel, HeadOutput
from diffprompt.models.mask_vae import MaskVae
from diffprompt.models.prompting import GlobalPromptBaseline, PromptAdapter, PromptSet, PromptTuner

__all__ = [
    "Condition",
    "DitModel",
    "GrounderFeatures",
    "GrounderModel",
    "HeadOutput",
    "MaskVae",
    "GlobalPromptBaseline",
    "PromptAdapter",
    "PromptSet",
    "PromptTuner",
]
