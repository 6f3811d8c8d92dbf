"""Exact subsampling MCMC with signed pseudo-marginal Metropolis-Hastings."""

__version__ = "0.1.0"
