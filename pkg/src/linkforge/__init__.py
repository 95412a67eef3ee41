"""Planar linkage path synthesis by contrastive retrieval and batched refinement."""

__version__ = "0.1.0"
