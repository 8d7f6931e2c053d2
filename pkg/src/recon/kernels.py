"""Kernel backend selection: compiled extension when importable, else pure Python."""
try:
    from ._kernels import chebyshev_owner, component_stats, label_components

    BACKEND = "cython"
except ImportError:  # extension not built
    from ._kernels_py import chebyshev_owner, component_stats, label_components

    BACKEND = "python"

__all__ = ["BACKEND", "chebyshev_owner", "component_stats", "label_components"]
