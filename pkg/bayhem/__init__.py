"""Hierarchical multi-level Gaussian process emulators and their benchmark harness."""

__version__ = "0.1.0"
