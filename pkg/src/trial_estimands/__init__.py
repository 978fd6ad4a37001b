"""Trial estimands - model-free estimands for sequences of emulated target trials."""

__version__ = "0.1.0"
