"""Cooperative mapping with compact plane-based maplets."""

__version__ = "0.1.0"
