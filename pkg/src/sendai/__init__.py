"""Sparse-sensor field reconstruction: recurrent LF decoding, latent alignment and HF peeling."""

__version__ = "0.1.0"
