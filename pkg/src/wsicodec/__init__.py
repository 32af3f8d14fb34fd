"""Learned tile codec with perceptual training, range coding and an RD benchmark."""

__version__ = "0.1.0"
