"""Explainable polyp segmentation: U-Net training, IoU/Dice evaluation, Grad-CAM."""

__version__ = "0.1.0"
