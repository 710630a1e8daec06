"""Dual-stream self-augmentation fine-tuning on a from-scratch autodiff core.

A second copy of a small transformer encoder is trained alongside the first;
a tapped hidden state from the first stream is summed into a chosen layer of
the copy, and a redundancy-reduction contrastive loss ties the two pooled
representations together.  Everything downstream of numpy (autodiff, encoder,
losses, optimizer, metrics) is implemented here so the behaviour is fully
inspectable and deterministically seeded.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad
from .errors import ConfigError, DataError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "ConfigError",
    "DataError",
    "DomainError",
    "ShapeError",
    "__version__",
]
