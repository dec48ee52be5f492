"""Low-rank expert adapter ensembles routed by gradient-direction similarity."""

__version__ = "0.1.0"
