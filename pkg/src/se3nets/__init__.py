"""Rigid-motion prediction networks on organized point clouds, in numpy.

The package bundles a small reverse-mode autodiff engine (:mod:`.tensor`),
SE(3) utilities (:mod:`.se3`), mask/transform layers (:mod:`.layers`), the
networks and baselines (:mod:`.model`), a synthetic scene generator
(:mod:`.scene`, :mod:`.dataset`) and training, evaluation and experiment
drivers.
"""

from .dataset import Dataset, generate_dataset, read_dataset, write_dataset
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = ["Dataset", "generate_dataset", "read_dataset", "write_dataset", "ModelConfig", "build_model",
           "load_checkpoint", "save_checkpoint", "TrainConfig", "evaluate", "train", "__version__"]
