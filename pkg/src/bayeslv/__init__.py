"""Bayesian local volatility calibration.

Modules: ``market_data`` (quotes and rescaling), ``kl_prior`` (analytic K-L basis),
``fem_pricer`` (quadratic FEM Dupire solver), ``posterior``, ``tsam`` (two-stage
adaptive Metropolis), ``experiments`` and ``cli``.
"""
__version__ = "0.1.0"
