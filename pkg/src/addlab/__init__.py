"""Addition-by-classification laboratory: formula images n+m labelled by their sum."""

__version__ = "0.1.0"
