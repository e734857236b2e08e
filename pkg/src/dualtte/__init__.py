"""Dual-graph spatio-temporal travel time estimation."""

__version__ = "0.1.0"
