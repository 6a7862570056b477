"""Multimodal concern summary generation with a numpy transformer."""

__version__ = "0.1.0"
