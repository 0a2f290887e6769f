"""Conditional token-sequence samplers trained to match unnormalized reward
densities, with exact enumeration oracles for verification."""

__version__ = "0.1.0"
