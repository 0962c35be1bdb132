"""Validated atlases of two-dimensional stable and unstable manifolds of Lorenz equilibria."""

__version__ = "0.1.0"
