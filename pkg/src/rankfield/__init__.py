"""Rank-based interacting diffusions: particles, hydrodynamic limit, fluctuations, portfolios."""
__version__ = "0.1.0"
