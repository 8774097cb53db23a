"""Diffusion-based co-speech gesture synthesis with semantic injection."""

__version__ = "0.1.0"
