"""Volumetric diffusion toolkit: multi-level patch training, tiled sampling and plug-and-play restoration."""

__version__ = "0.1.0"
