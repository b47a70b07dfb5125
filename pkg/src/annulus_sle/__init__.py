"""Numerical laboratory for annulus Schramm-Loewner evolution."""

__version__ = "0.1.0"
