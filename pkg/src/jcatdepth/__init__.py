"""Depth completion with joint convolutional-attention/Transformer encoders and
non-local spatial propagation, on a small numpy autodiff core."""

from .config import ModelConfig, preset
from .metrics import MetricsRecord, baseline_fill, compute_metrics, loss_l1_l2
from .model import DepthCompletionNet, ModelOutput, RgbdSample, count_parameters
from .tensor import ConfigError, NonFiniteError, ShapeError, Tensor, no_grad

__all__ = [
    "ConfigError", "DepthCompletionNet", "MetricsRecord", "ModelConfig", "ModelOutput",
    "NonFiniteError", "RgbdSample", "ShapeError", "Tensor", "baseline_fill", "compute_metrics",
    "count_parameters", "loss_l1_l2", "no_grad", "preset",
]
__version__ = "0.1.0"
