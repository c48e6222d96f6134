"""Semantic embedding transmission: codec, channel simulation, KB retrieval."""

__version__ = "0.1.0"
