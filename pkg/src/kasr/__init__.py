"""Adversarially learned image degradation and super-resolution, desk scale."""

__version__ = "0.1.0"
