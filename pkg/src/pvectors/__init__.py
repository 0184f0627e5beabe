"""Parallel-coupled TDNN/Transformer speaker embeddings."""

__version__ = "0.1.0"
