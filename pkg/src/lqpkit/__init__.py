"""Learned QP controllers for constrained linear systems."""

__version__ = "0.1.0"
