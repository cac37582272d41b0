"""Perception-enhanced multimodal semantic communication lab."""

__version__ = "0.1.0"
