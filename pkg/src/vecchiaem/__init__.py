"""Vecchia-approximated Gaussian process likelihoods with EM refinement."""

__version__ = "0.1.0"
