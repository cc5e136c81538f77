"""Desk-scale real-time detection transformer toolkit."""

__version__ = "0.1.0"
