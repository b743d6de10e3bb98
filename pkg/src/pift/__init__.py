"""Physics-informed fine-tuning of neural PDE surrogates at desk scale."""

__version__ = "0.1.0"
