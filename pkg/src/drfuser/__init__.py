"""Multi-modal (RGB + event) steering-angle regression."""

__version__ = "0.1.0"
