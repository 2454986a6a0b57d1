"""Class-agnostic semi-supervised training for a miniature dense detector."""

__version__ = "0.1.0"
