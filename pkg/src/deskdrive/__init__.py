"""Desk-scale sim-to-real driving stack and transfer-bound laboratory."""

__version__ = "0.1.0"
