"""Thermal/RGB registration and fusion toolkit."""

__version__ = "0.1.0"
