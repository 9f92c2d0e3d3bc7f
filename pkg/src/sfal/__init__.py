"""Simulation and verification toolkit for time-inhomogeneous slow-fast SDEs."""
__version__ = "0.1.0"
