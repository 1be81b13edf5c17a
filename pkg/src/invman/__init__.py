"""Local invariant manifolds of correspondences near partially hyperbolic sets."""
__version__ = "0.1.0"
