"""Text-independent speaker verification with a keyword-adversarial embedding network."""

__version__ = "0.1.0"
