"""Dual-pipeline neural fluid simulator: continuous convolutions plus 3D-RoPE attention."""

__version__ = "0.1.0"
