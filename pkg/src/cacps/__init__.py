"""Confidence-aware cross pseudo supervision for 2D segmentation.

Small, self-contained research codebase: a float64 reverse-mode autodiff
core, a compact encoder-decoder segmentation network, Fourier amplitude
mixing for cross-domain augmentation, and a dual-network semi-supervised
trainer with confidence-weighted cross pseudo supervision.
"""

__version__ = "0.1.0"
