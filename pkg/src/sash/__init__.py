"""Secure aggregation with seed-homomorphic masking."""

__version__ = "0.1.0"
