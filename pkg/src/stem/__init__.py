"""Conditional diffusion inference of spot-level gene expression from
histology-patch condition embeddings."""

__version__ = "0.1.0"
