"""Continuous conditional GANs with dual negative data augmentation, at desk scale."""

__version__ = "0.1.0"
