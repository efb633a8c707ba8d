"""Gated context-aware Swin U-Net for exemplar-free object counting."""

__version__ = "0.1.0"
