"""Approximate Bayesian updates by linearizing log-likelihoods in the prior's
sufficient statistics, with random-matrix extended target tracking updates."""

__version__ = "0.1.0"
