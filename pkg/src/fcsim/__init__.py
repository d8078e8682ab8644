"""Distributed functional compression over simulated wireless channels."""

__version__ = "0.1.0"
