"""Segmental attention encoder-decoder models with latent segment boundaries."""

__version__ = "0.1.0"
