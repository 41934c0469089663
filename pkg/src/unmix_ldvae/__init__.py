"""Variational hyperspectral unmixing with a transformer encoder, Dirichlet
latent abundances and Gaussian endmember bundles."""

__version__ = "0.1.0"
