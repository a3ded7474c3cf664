"""Gradient-flow computation of higher-order interpolating splines and
penalty networks on embedded manifolds."""

__version__ = "0.1.0"
