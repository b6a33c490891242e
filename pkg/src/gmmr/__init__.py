"""Gaussian-mixture query embeddings for logical query answering over incomplete knowledge graphs."""

__version__ = "0.1.0"
