"""Divide-and-conquer hierarchical transformer for video quality scoring."""

from . import autodiff, data, losses, metrics, model, training

__version__ = "0.1.0"

__all__ = ["autodiff", "data", "losses", "metrics", "model", "training", "__version__"]
