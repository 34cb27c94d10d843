"""Core modules for the pGLMM toolkit."""
