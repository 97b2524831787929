"""Learned and classical optimizers for atomic structures on rough energy landscapes."""

__version__ = "0.1.0"
