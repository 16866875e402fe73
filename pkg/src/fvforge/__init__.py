"""Backbone-agnostic recognition pipeline over saved network activations."""

__version__ = "0.1.0"
