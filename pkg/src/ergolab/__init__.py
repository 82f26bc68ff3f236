"""Numerical laboratory for ergodic stochastic control via adjoint BSDEs."""

__version__ = "0.1.0"
