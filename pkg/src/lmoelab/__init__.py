"""Desk-scale laboratory for language-guided expert routing, semantic
projection distillation and query-language alignment on synthetic
long-tailed multi-camera scenes."""

__version__ = "0.1.0"
