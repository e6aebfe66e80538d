"""Longitudinal timeline summarisation: segmentation, key phrases, a
hierarchical VAE summariser, clinically guided LLM summaries and metrics."""

__version__ = "0.1.0"
