"""Scalable structure attacks and robust aggregation for graph neural networks."""

__version__ = "0.1.0"
