"""Desk-scale controllable video restoration with a toy diffusion transformer."""

__version__ = "0.1.0"
