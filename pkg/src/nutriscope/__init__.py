"""Nutrition estimation from single RGB images.

The pipeline calibrates provider depth with a learnable scale/shift plus a
residual refiner, fuses RGB and depth features per frequency band, and
regresses calories, mass, fat, carbohydrate and protein through a gated,
channel-masked head. A procedural scene generator supplies training data with
exact compositional labels.
"""

from .config import Config, load_config
from .losses import PmaeReport, TaskWeights, pmae, task_difficulty
from .model import NutritionModel
from .tensor import Tensor
from .training import ablate, evaluate, finetune, predict, train

__all__ = [
    "Config",
    "load_config",
    "PmaeReport",
    "TaskWeights",
    "pmae",
    "task_difficulty",
    "NutritionModel",
    "Tensor",
    "ablate",
    "evaluate",
    "finetune",
    "predict",
    "train",
]

__version__ = "0.1.0"
