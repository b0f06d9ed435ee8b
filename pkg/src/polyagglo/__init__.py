"""Polytopal mesh agglomeration by recursive graph bisection."""

__version__ = "0.1.0"
