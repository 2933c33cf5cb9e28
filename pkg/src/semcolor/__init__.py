"""Grayscale-conditioned latent diffusion colorization with semantic guidance."""

__version__ = "0.1.0"
