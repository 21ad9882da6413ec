"""Continual learning for variational quantum intrusion-detection classifiers."""

__version__ = "0.1.0"
