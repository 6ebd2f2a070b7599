"""Simulated active tactile reconstruction of unknown objects."""

__version__ = "0.1.0"
