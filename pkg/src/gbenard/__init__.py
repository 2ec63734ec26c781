"""Spectral Galerkin solver for time-fractional weighted Boussinesq flow on the torus."""

__version__ = "0.1.0"
