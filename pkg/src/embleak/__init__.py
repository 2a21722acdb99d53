"""Transferable embedding-inversion attacks against anonymous text encoders."""

__version__ = "0.1.0"
