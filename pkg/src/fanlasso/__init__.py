"""Transfer learning for factor-augmented sparse nonparametric regression."""

__version__ = "0.1.0"
