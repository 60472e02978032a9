"""Video behaviour-event detection pipeline."""
__version__ = "0.1.0"
