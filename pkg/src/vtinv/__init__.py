"""Acoustic-to-articulatory inversion of full vocal tract contours."""

from vtinv.corpus import ARTICULATORS, N_POINTS, PIXEL_SPACING_MM, PhoneInventory
from vtinv.errors import DataError, DimensionError, DivergenceError, NumericError, VTError

__version__ = "0.1.0"

__all__ = [
    "ARTICULATORS",
    "N_POINTS",
    "PIXEL_SPACING_MM",
    "PhoneInventory",
    "DataError",
    "DimensionError",
    "DivergenceError",
    "NumericError",
    "VTError",
]
