"""Unsupervised cross-modal hashing: anchor graphs, correlation-maximizing
spectral binary codes, and learned hash functions for Hamming retrieval."""

__version__ = "0.1.0"
