"""Binaural classroom-scene synthesis and separation evaluation toolkit."""

__version__ = "0.1.0"
