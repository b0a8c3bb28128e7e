"""Desk-scale many-to-many voice transformer network on pre-extracted features."""

from .errors import VtnError

__all__ = ["VtnError"]
__version__ = "0.1.0"
