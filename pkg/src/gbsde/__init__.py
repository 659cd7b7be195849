"""Solvers and diagnostics for multi-dimensional BSDEs driven by G-Brownian motion."""

__version__ = "0.1.0"
