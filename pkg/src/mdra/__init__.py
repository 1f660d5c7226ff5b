"""Learning-based joint discrete/continuous optimization for wireless resource allocation."""

from .config import DataConfig, ExperimentConfig, ModelConfig, TrainConfig
from .problem import DeadEndError, SupportSet
from .tasks import CfTask, MaTask, make_task

__all__ = [
    "CfTask",
    "DataConfig",
    "DeadEndError",
    "ExperimentConfig",
    "MaTask",
    "ModelConfig",
    "SupportSet",
    "TrainConfig",
    "make_task",
]
