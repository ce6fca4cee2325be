"""Kernel-guided single-image rain-streak removal, built on numpy."""

__version__ = "0.1.0"
