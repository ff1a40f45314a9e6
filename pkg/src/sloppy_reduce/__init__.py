"""Sloppiness-guided strategic model reduction."""

__version__ = "0.1.0"
