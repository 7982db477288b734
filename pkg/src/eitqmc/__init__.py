"""Bayesian electrical impedance tomography with randomly shifted lattice rules."""

__version__ = "0.1.0"
