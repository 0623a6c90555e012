"""Few-shot document-level relation extraction: benchmark construction,
episode sampling, and threshold-class model heads over frozen encoders."""

__version__ = "0.1.0"
