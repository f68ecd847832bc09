"""Synthetic diffusion phantoms, constrained spherical deconvolution, a
voxelwise FOD estimator and cross-site harmonisation experiments."""

from . import csd, estimator, geometry, harmonize, harness, io, kernels, metrics, phantom

__version__ = "0.1.0"

__all__ = ["csd", "estimator", "geometry", "harmonize", "harness", "io", "kernels",
           "metrics", "phantom", "__version__"]
