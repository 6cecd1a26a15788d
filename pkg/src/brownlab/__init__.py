"""brownlab: a Monte Carlo laboratory for planar Brownian intersection and
disconnection exponents, frontier fractal dimensions, and the transfer-operator
machinery behind them."""

__version__ = "0.1.0"

from . import errors, rng  # noqa: F401
