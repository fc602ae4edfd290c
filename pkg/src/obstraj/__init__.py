"""Observability-aware trajectory optimization for sensor self-calibration."""
__version__ = "0.1.0"
