"""Simulation and verification toolkit for continuous spontaneous localization."""

__version__ = "0.1.0"
