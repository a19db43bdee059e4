"""Place embeddings learned from movement data."""

__version__ = "0.1.0"
