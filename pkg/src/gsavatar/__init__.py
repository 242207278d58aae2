"""Articulated Gaussian-splat avatars from occluded synthetic captures, at desk scale."""

__version__ = "0.1.0"
