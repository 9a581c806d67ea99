"""Vlasov-Navier-Stokes pipe workbench.

Stationary states near Poiseuille flow, exit-condition checks for the damped
characteristics, coupled evolution, and decay-rate measurements.
"""

import os

# the bundled TBB is too old for numba; fall back to the OpenMP/workqueue pool
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from vnspipe.geometry import BoundaryClass, PipeDomain, PoiseuilleFlow, Side, Tag

__all__ = ["BoundaryClass", "PipeDomain", "PoiseuilleFlow", "Side", "Tag"]
__version__ = "0.1.0"
