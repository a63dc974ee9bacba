"""Balanced multi-view clustering with view-specific contrastive regularisation."""

__version__ = "0.1.0"
