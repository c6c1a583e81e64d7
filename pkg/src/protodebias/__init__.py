"""Prototype-based image classification with unsupervised disentanglement of
causal and spurious factors, and backdoor-adjusted inference."""

__version__ = "0.1.0"
