"""Two-party simulator for nearest-lattice-point computation on reduced 2D lattices."""

from .lattice import (
    Lattice2D,
    LatticeParameterError,
    LatticePoint,
    babai_decode,
    make_lattice,
    nearest_point,
    relevant_vectors,
)

__version__ = "0.1.0"

__all__ = [
    "Lattice2D",
    "LatticeParameterError",
    "LatticePoint",
    "babai_decode",
    "make_lattice",
    "nearest_point",
    "relevant_vectors",
    "__version__",
]
