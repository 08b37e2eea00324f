"""Noisy-label segmentation training with batch-relative label quality weighting."""

__version__ = "0.1.0"
