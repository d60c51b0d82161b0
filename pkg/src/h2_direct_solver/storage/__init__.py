"""
File formats: the binary H2DS container for matrices and factorizations, and
point / vector files.
"""

from .container import container_kind, load_factorization, load_h2, save_factorization, save_h2
from .points import load_points, load_vector, save_points, save_vector

__all__ = [
    "container_kind",
    "load_factorization",
    "load_h2",
    "save_factorization",
    "save_h2",
    "load_points",
    "load_vector",
    "save_points",
    "save_vector",
]
