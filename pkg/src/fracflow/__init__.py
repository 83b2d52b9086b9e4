"""fracflow: two-phase Darcy flow on 2D fractured porous media.

Hybrid-dimensional model (2D matrix + 1D fracture network) with
discontinuous pressures at matrix-fracture interfaces, discretized by a
vertex-and-cell finite-volume gradient scheme, solved by Newton with
relaxation and adaptive time stepping, and instrumented with
gradient-discretisation quality measures and a discrete energy ledger.
"""

__version__ = "0.1.0"
