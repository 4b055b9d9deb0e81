"""
Federated SSL simulator - Main Application Package
Entry points and CLI functionality.
"""
__version__ = "1.0.0"
