"""Diffusion-based sequential recommendation with quantized guidance and
contrastive dispersion of the generated items."""

__version__ = "0.1.0"
