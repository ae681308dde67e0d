"""Layer-local external-memory transformer with LRU convex-blend writes,
bidirectional token-memory cross-attention, and segment-level recurrence,
plus a behavior-cloning pipeline on synthetic partially observable tasks.
"""

from .model import ElmurModel, ModelConfig
from .training import TrainConfig

__all__ = ["ElmurModel", "ModelConfig", "TrainConfig"]
__version__ = "0.1.0"
