"""Finite element solver for the boundary Yamabe problem with minimal boundary."""

__version__ = "0.1.0"
