"""Outlier-aware training and clustered quantization for RepVGG-style nets.

Modules: ``tensor``/``ops`` (numpy autograd), ``repvgg`` (blocks, OABN,
branch merging), ``quant`` (quantizers), ``pipeline`` (training phases),
``diagnostics`` (outlier analysis), ``checkpoint``/``config``/``cli``.
"""

from .repvgg import DeployedNet, NetConfig, RepVggNet, convert_to_vgg
from .pipeline import RunReport, TrainConfig

__version__ = "0.1.0"

__all__ = ["DeployedNet", "NetConfig", "RepVggNet", "RunReport", "TrainConfig", "convert_to_vgg"]
