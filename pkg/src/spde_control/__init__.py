"""Numerical toolkit for optimal control of 1D semilinear stochastic heat
equations: forward simulation, backward adjoint solvers, an exact
linear-quadratic Riccati benchmark, and statistical optimality checks."""

__version__ = "0.1.0"
