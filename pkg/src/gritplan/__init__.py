"""Bi-level winter road maintenance planning: depot assignment policy over a constructive salting router."""

__version__ = "0.1.0"
