"""Self-supervised pre-training and cross-view evaluation of gait backbones."""

__version__ = "0.1.0"
