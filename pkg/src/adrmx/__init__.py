"""Additive disentanglement of domain features with remix loss, on a small numpy autodiff engine."""

__version__ = "0.1.0"
