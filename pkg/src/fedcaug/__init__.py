"""Federated causal augmentation on a small numpy CNN."""

__version__ = "0.1.0"
