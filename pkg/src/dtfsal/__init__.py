"""Desk-scale audio-visual saliency prediction.

A self-contained implementation of a token-enhanced multi-scale saliency
model: pyramid video encoder, log-mel audio branch, tri-stream audio-visual
fusion, hierarchical multi-decoder, KL+CC training objective, and the four
standard gaze metrics, all running on an in-package autograd tensor.
"""

__version__ = "0.1.0"

from .tensor import GradTape, NumericsError, ShapeError, Tensor

__all__ = ["GradTape", "NumericsError", "ShapeError", "Tensor", "__version__"]
