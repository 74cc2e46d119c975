"""Numerical laboratory for SDEs with singular horizontal drift on Carnot groups."""

__version__ = "0.1.0"
