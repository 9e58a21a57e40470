"""Noisy-correspondence-robust cross-modal matching on desk-scale synthetic data."""

__version__ = "0.1.0"
