"""Adversarial leakage localization toolkit."""

__version__ = "0.1.0"
