"""Radar micro-Doppler activity classification with a bidirectional selective SSM."""

from .analysis import AblationGrid, CostReport, calibrate_dim, count_flops, count_params, run_ablation
from .data import DEFAULT_CLASSES, Dataset, Spectrogram, SynthClass, WindowSpec, make_dataset, read_dataset, write_dataset
from .estimator import RadMambaClassifier
from .model import ConfigError, ModelConfig, ProjectionKind, RadMamba, corr_avg, load_checkpoint, save_checkpoint
from .preprocess import ChanDsConfig, PatchGeometry
from .train import RunReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AblationGrid",
    "ChanDsConfig",
    "ConfigError",
    "CostReport",
    "DEFAULT_CLASSES",
    "Dataset",
    "ModelConfig",
    "PatchGeometry",
    "ProjectionKind",
    "RadMamba",
    "RadMambaClassifier",
    "RunReport",
    "Spectrogram",
    "SynthClass",
    "TrainConfig",
    "WindowSpec",
    "calibrate_dim",
    "corr_avg",
    "count_flops",
    "count_params",
    "evaluate",
    "load_checkpoint",
    "make_dataset",
    "read_dataset",
    "run_ablation",
    "save_checkpoint",
    "train",
    "write_dataset",
]
