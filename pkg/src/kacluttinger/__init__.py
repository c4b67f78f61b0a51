"""Numerical laboratory for Dirichlet spectra among Poissonian hard obstacles."""

__version__ = "0.1.0"
