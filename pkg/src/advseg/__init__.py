"""Adversarial training for convolutional semantic segmentation, desk scale.

A segmentation network and a convolutional adversary are trained against
each other: the segmenter minimizes per-pixel cross-entropy plus an
adversarial term, the adversary learns to tell predicted label maps from
ground-truth ones. Everything runs on a from-scratch float64 autodiff
engine so gradients are checkable against finite differences.
"""

from .tensor import Tensor, backward, grad_check

__all__ = ["Tensor", "backward", "grad_check"]
__version__ = "0.1.0"
