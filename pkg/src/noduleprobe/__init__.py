"""Two-stage self-explanatory lung nodule classification."""

__version__ = "0.1.0"
