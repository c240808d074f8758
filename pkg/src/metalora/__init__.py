"""Tensor-network low-rank adapters with input-conditioned seeds."""

__version__ = "0.1.0"
