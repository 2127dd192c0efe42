"""Dual-codebook vector quantization and hierarchical autoregressive token generation."""

__version__ = "0.1.0"
