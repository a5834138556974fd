"""Sketch-conditioned 3D shape generation with SDF auto-decoders and conditional flows."""

__version__ = "0.1.0"
