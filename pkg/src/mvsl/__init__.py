"""Few-shot fine-tuning of a seeded toy vision-language model.

Residual adapters on the image branch, prompt tuning on the text branch,
global + patch-level contrastive losses, and semantic-graph distillation,
with seeded toy encoders so every quantity is reproducible on a CPU.
"""

from importlib import resources

from .encoders import EncoderConfig, build_encoders, tokenize
from .model import Student, TrainConfig
from .objective import LossWeights
from .mgcl import Temperatures

__all__ = ["EncoderConfig", "LossWeights", "Student", "Temperatures", "TrainConfig",
           "build_encoders", "fixture_path", "tokenize"]


def fixture_path(name: str):
    """Path of a bundled prompt-corpus fixture, e.g. ``fixture_path("btmri")``."""
    return resources.files(__package__) / "fixtures" / f"{name}.json"
