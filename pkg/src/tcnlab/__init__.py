"""Temporal convolutional networks for sepsis-onset prediction, on plain numpy."""

__version__ = "0.1.0"
