"""Explicit conditional multimodal VAE at desk scale: numpy autodiff, latent
factorisation, divergence variants, synthetic audio-visual corpus and trainer."""

__version__ = "0.1.0"
