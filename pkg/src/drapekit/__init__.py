"""Cloth draping by per-frame energy minimization over skinned bodies."""

__version__ = "0.1.0"
