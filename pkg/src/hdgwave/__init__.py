"""Hybridized DG (HDG/EDG/IEDG) solvers for transient wave propagation."""

__version__ = "0.1.0"
