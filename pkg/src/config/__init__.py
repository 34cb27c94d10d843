"""
Configuration package for the pGLMM toolkit.
Contains centralized default settings.
"""
