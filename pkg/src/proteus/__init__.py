"""Feature distillation of small vision transformers on a numpy autodiff core."""
from .errors import ConfigError, FormatError
from .vit import Model, ViTConfig, vit_forward
from .distill import LossWeights, Objective
from .optim import Schedule

__version__ = "0.1.0"

__all__ = ["ConfigError", "FormatError", "Model", "ViTConfig", "vit_forward", "LossWeights", "Objective",
           "Schedule", "__version__"]
