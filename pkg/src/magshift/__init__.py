"""Magnification-robust classification toolkit: LOMO evaluation, gradient reversal,
GAN augmentation and sparse embedding signatures."""

__version__ = "0.1.0"
