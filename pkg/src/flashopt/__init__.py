"""Memory-efficient optimizer toolkit with desk-scale verification tools."""

__version__ = "0.1.0"
