"""Landmark diffusion conditioned on an explicit 3D head model, at desk scale."""

__version__ = "0.1.0"
