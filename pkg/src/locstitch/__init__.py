"""Localize-and-stitch model merging on named float32 parameter sets."""

__version__ = "0.1.0"
