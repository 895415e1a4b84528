"""Text-conditioned selective state-space models for temporal grounding on skeleton graphs."""

from .autodiff import Tape, Tensor
from .grounding import Segment, map_suite
from .model import ModelConfig, TmMamba
from .train import TrainConfig, train

__all__ = ["Tape", "Tensor", "Segment", "map_suite", "ModelConfig", "TmMamba", "TrainConfig", "train"]
__version__ = "0.1.0"
