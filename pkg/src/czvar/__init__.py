"""Variational sparse domination for Calderón–Zygmund operators on dyadic grids."""

__version__ = "0.1.0"

from czvar.errors import (
    CZVarError,
    DomainError,
    InvalidArgument,
    InvalidWeight,
    RankDeficiency,
    SingularityError,
    TruncationTooFine,
)
from czvar.grid import Cube, ScalarSignal, VectorSignal

__all__ = [
    "CZVarError",
    "Cube",
    "DomainError",
    "InvalidArgument",
    "InvalidWeight",
    "RankDeficiency",
    "ScalarSignal",
    "SingularityError",
    "TruncationTooFine",
    "VectorSignal",
    "__version__",
]
