"""Infini-attention laboratory: a small decoder with compressive-memory attention."""

__version__ = "0.1.0"
