"""Dual-student knowledge-distillation anomaly detection, desk scale.

A frozen vision-transformer teacher feeds two students: an encoder student
distilled on class tokens and a decoder student that reconstructs grouped
teacher patch features through a noisy bottleneck.  Training couples the two
reconstruction errors with a noisy-OR objective; inference fuses them into a
single anomaly score.  Everything runs on a small hand-rolled autodiff stack
so each formula is testable against independent oracles.
"""

from .autodiff import Tensor, backward, no_grad
from .errors import ConfigError, DataError, NumericError

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "ConfigError",
    "DataError",
    "NumericError",
]

__version__ = "0.1.0"
