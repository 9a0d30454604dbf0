"""Autoregressive synthesis of 3D vascular trees: tokenize vessel trees
with a VQ-VAE, generate token sequences with a decoder-only transformer,
and reconstruct watertight meshes by sweeping cross-section splines."""

__version__ = "0.1.0"
