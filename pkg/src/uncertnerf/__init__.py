"""Generalizable radiance-field rendering with source- and target-view uncertainty."""
from .geometry import Intrinsics, Pose
from .losses import LossConfig
from .model import GeneralizableRenderer, RendererConfig
from .scene import DatasetConfig, make_dataset
from .train import EvalReport, Trainer, TrainConfig, evaluate

__version__ = "0.1.0"
