"""Crowd density estimation with self-organized operational layers.

From-scratch convolution/pooling kernels with analytic gradients, a
three-column operational density network, Gaussian ground-truth maps,
Adam training, and a full metric/benchmark suite.
"""

from .model import build_model, default_config, init_weights, tiny_config
from .serialize import load_model, save_model

__all__ = [
    "build_model",
    "default_config",
    "tiny_config",
    "init_weights",
    "save_model",
    "load_model",
]

__version__ = "0.1.0"
