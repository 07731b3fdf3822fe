"""Exact-subdomain Schwarz preconditioning for the implicit double-curl system.

The package splits into:

* :mod:`flashmp.grid` - boxes, field layouts, layout permutations
* :mod:`flashmp.operators` - differences, curls, the corrected operator
* :mod:`flashmp.transform` - per-axis SVD factors and field transforms
* :mod:`flashmp.subdomain` - the exact subdomain solver and cost model
* :mod:`flashmp.schwarz` - partitioning, halo exchange, RAS apply
* :mod:`flashmp.krylov` - preconditioned BiCGSTAB / restarted GMRES
* :mod:`flashmp.cn_driver` - implicit time stepping
* :mod:`flashmp.cli` - experiment harness (``flashmp`` command)
"""

from .grid import Box, FieldVector, GridMajorVector
from .operators import OperatorParams, apply_operator, apply_curl, apply_double_curl, assemble_sparse
from .transform import TransformSet, svd_of_difference
from .subdomain import (SubdomainSolverData, cost_report, exact_solve, precompute, solve)
from .schwarz import (DistributedOperator, Exchanger, Partition, RasPreconditioner,
                      exchange_halo, gather_field, make_partition, make_transport,
                      ras_apply, scatter_field)
from .krylov import SolveReport, SolverConfig, bicgstab, gmres, reduce_dot
from .cn_driver import CnSolver, EmState, build_rhs, cn_step

__version__ = "0.1.0"

__all__ = [
    "Box", "FieldVector", "GridMajorVector",
    "OperatorParams", "apply_operator", "apply_curl", "apply_double_curl", "assemble_sparse",
    "TransformSet", "svd_of_difference",
    "SubdomainSolverData", "precompute", "exact_solve", "solve", "cost_report",
    "Partition", "make_partition", "Exchanger", "exchange_halo", "RasPreconditioner",
    "ras_apply", "DistributedOperator", "scatter_field", "gather_field", "make_transport",
    "SolverConfig", "SolveReport", "bicgstab", "gmres", "reduce_dot",
    "EmState", "build_rhs", "cn_step", "CnSolver",
    "__version__",
]
