"""Self-attention CNN workbench for binary chest X-ray screening.

Tensor autograd, attention condenser and PEPE blocks, complexity accounting,
training, evaluation, occlusion explanations and constrained design search.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad
from .model import NetworkConfig, build_network, reference_config, load_config
from .complexity import count_complexity
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "no_grad",
    "NetworkConfig",
    "build_network",
    "reference_config",
    "load_config",
    "count_complexity",
    "load_checkpoint",
    "save_checkpoint",
]
