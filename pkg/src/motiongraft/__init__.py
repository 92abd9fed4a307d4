"""Pose-driven video motion editing on synthetic sprite scenes."""

__version__ = "0.1.0"
