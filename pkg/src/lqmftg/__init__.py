"""Solvers and learners for finite-horizon linear-quadratic mean-field type games."""
__version__ = "0.1.0"
