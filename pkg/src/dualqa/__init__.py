"""Textless spoken question answering over deduplicated discrete speech units."""
__version__ = "0.1.0"
