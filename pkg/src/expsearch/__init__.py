"""Simulation and analysis of autonomous experiment-search campaigns."""

__version__ = "0.1.0"
