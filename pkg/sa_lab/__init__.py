"""Constant-stepsize stochastic approximation with decision-dependent Markov noise.

A desk-scale laboratory: controlled kernels, mean-field roots, the SA
recursion with coupled pairs, Poisson/Gateaux machinery for the bias
terms, and estimators that turn replicated runs into scaling reports.
"""

__version__ = "0.4.0"
