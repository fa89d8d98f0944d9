"""Adaptive QM/MM coupling for crystalline defects with a posteriori error control."""

__version__ = "0.1.0"
