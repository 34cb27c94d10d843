"""Utility modules for logging and parallel execution."""
