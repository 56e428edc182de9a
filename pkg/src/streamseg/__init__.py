"""Streaming online zero-shot 3D instance segmentation engine."""

__version__ = "0.1.0"
