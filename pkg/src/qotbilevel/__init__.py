"""Quadratically regularized optimal transport and bilevel marginal identification."""

__version__ = "0.1.0"
