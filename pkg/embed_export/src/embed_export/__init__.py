"""Transformer token-embedding exporter for the corpus exchange format."""

__version__ = "0.1.0"
