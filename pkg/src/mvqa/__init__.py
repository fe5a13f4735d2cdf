"""Multi-view attention VQA at desk scale.

A from-scratch stack: a dense-tensor autodiff engine, dual-branch image
encoding, GRU question encoding, word-to-text and image-to-question
attention, type-routed bilinear fusion with per-answer classification,
a composite training loss, dataset quality tooling, and a reproducible
training/evaluation CLI.
"""

from .autodiff import Tensor, Tape, backward, grad_check
from .rng import Rng

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "grad_check", "Rng", "__version__"]
