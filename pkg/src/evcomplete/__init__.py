"""Sparse-to-dense event completion with a conditional point-cloud diffusion model."""

__version__ = "0.1.0"
