"""Tensor-based state transitions for tree-structured recursive networks."""

__version__ = "0.1.0"
