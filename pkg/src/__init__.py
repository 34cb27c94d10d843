"""Penalized generalized linear mixed models for replicable multi-study prediction."""
__version__ = "0.1.0"
