"""Desk-scale embedding-based retrieval for a two-sided lodging marketplace."""

__version__ = "0.1.0"
