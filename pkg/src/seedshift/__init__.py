"""Seed-vector reliability lab for small conditional diffusion models."""

__version__ = "0.1.0"
