"""Autotuner for OpenMP-style runtime configurations under power
constraints, built around a relational graph-convolution model of region
code graphs and an analytic hardware simulator."""

__version__ = "0.1.0"
