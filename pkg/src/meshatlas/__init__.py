"""Hierarchical mesh VAE shape atlas on vertex-corresponded triangle meshes."""

__version__ = "0.1.0"
