"""Learning set functions through mean-field variational fixed points."""

__version__ = "0.1.0"
