"""Tensor decompositions and sequential behavior labeling for trial x time x neuron data."""

__version__ = "0.1.0"
