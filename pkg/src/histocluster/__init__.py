"""Unsupervised tile clustering of histology slides with survival analysis of the clusters."""

__version__ = "0.1.0"
