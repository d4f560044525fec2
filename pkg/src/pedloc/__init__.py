"""Monocular pedestrian distance estimation and temporal relation networks."""

__version__ = "0.1.0"
