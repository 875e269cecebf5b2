"""Ensemble Kalman inversion with fundamental-subspace diagnostics."""

from . import diagnostics, ensemble, idealized, linops, problems, subspaces
from ._engine import backend_name
from .errors import EkisubError

__version__ = "0.1.0"

__all__ = [
    "EkisubError",
    "backend_name",
    "diagnostics",
    "ensemble",
    "idealized",
    "linops",
    "problems",
    "subspaces",
    "__version__",
]
