"""Trimap-free matting guided by caption-pretrained saliency."""

__version__ = "0.1.0"
