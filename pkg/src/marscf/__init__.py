"""Multi-scale split-coupling normalizing flows with channel-autoregressive priors."""

from .data import DatasetSpec, bits_per_dim, dequantize, load_dataset
from .interpolate import InterpConfig, interpolate_path, linear_interp, project_interp
from .model import MARSCF, FlowConfig, channel_dims, critical_path_steps, marps_sample
from .train import TrainConfig, evaluate, train

__all__ = [
    "MARSCF", "FlowConfig", "channel_dims", "critical_path_steps", "marps_sample",
    "DatasetSpec", "load_dataset", "dequantize", "bits_per_dim",
    "TrainConfig", "train", "evaluate",
    "InterpConfig", "linear_interp", "project_interp", "interpolate_path",
]

__version__ = "0.1.0"
