"""Remote state estimation with stochastic event-based sensor triggers."""

__version__ = "0.1.0"
