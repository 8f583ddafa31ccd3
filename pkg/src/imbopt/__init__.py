"""Per-class normalized gradient methods for imbalanced classification."""

__version__ = "0.1.0"
