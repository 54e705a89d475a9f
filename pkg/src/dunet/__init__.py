"""DUNet object detection toolkit: model, training, evaluation, streaming
replay and capture-time augmentation, on a small numpy autodiff engine."""

from .geometry import Anchor, Box, Detection
from .model import DUNet, DUNetConfig, build_dunet, desk_config, paper_config
from .tensor import Tensor

__all__ = ["Anchor", "Box", "Detection", "DUNet", "DUNetConfig", "Tensor", "build_dunet", "desk_config", "paper_config"]
__version__ = "0.1.0"
