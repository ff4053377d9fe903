"""Group-bias audit of saliency explanations for presentation attack detection models."""

__version__ = "0.1.0"
