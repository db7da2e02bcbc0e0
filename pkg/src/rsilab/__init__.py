"""Desk-scale lab for recursive self-training of a minimal diffusion model."""

__version__ = "0.1.0"
