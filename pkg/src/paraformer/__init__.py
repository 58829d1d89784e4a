"""Serial and branch-parallel Transformer encoders with explicit matrix-vector expansions."""

__version__ = "0.1.0"
