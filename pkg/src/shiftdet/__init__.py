"""Desk-scale domain-adaptive detection transformer.

A miniature DETR-style detector plus training-only adversarial feature
alignment at three depths (backbone pixels, encoder tokens, decoder
instances) and an inter-layer prediction-consistency loss, all built on
a from-scratch reverse-mode autodiff engine over numpy arrays.
"""

from .tensor import Tensor, no_grad
from .gradcheck import grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "grad_check", "__version__"]
