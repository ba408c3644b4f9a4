"""Probabilistic programs with inline guides, trained by a variance-reduced ELBo gradient."""

__version__ = "0.1.0"
