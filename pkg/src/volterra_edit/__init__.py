"""Add/remove image-editing toolkit: dataset pipeline, Volterra-fusion
diffusion adapter, evaluation metrics, and a blind rating service."""

__version__ = "0.1.0"
