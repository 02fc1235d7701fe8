"""Prototype-guided dual-branch feature reconstruction for anomaly detection.

A self-contained, CPU-only research codebase: a small reverse-mode
autodiff engine, a tiny vision transformer trained from scratch on
synthetic low-contrast imagery, a diversity-aware prototype bank guiding
a reconstruction decoder, and the scoring / evaluation / CLI tooling
around them.
"""

from .backend import active_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "__version__"]
