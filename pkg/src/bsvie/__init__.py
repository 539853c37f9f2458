"""Deep solver for forward-backward stochastic Volterra integral equations."""

__version__ = "0.1.0"
