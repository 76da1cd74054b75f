"""3D multi-class segmentation network with a context-aware shifted-window bottleneck."""

from .backbone import CISUNet, build_model, count_parameters
from .config import AttentionVariant, DataConfig, ModelConfig, TrainConfig, load_config, preset

__all__ = [
    "AttentionVariant", "CISUNet", "DataConfig", "ModelConfig", "TrainConfig",
    "build_model", "count_parameters", "load_config", "preset",
]
__version__ = "0.1.0"
