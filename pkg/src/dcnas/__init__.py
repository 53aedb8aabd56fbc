"""Differentiable architecture search over Conformer-style cells."""

__version__ = "0.1.0"
