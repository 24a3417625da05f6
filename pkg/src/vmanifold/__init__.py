"""Variational manifold learning for free-breathing ungated multislice dynamic MRI."""

__version__ = "0.1.0"
