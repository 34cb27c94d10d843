"""Services package for the pGLMM toolkit.

This package contains service classes and helpers that coordinate between
the models and the command line: file formats, simulation and evaluation.
"""
