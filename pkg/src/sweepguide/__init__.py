"""Sweep-volume simulation, probe-guidance classifiers, and guidance service."""

__version__ = "0.1.0"
