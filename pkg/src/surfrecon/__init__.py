"""Surface reconstruction from partial point observations."""
__version__ = "0.1.0"
