"""Difference operators, curls and the boundary-corrected field operator.

The 1-D forward difference is upper bidiagonal (-1 on the diagonal, +1 on
the superdiagonal) and the backward difference is its negated transpose,
so both carry an implicit zero ghost value just outside the grid.  Curls
are the usual 3x3 antisymmetric block arrangement of the per-axis
differences, the double curl is the backward-curl o forward-curl
composition, and the full operator is

    A = I + alpha * (double_curl + boundary_deltas)

where the diagonal boundary term restores the rows that the one-sided
differences truncate at low-index faces (Dirichlet setting).  Everything
exists matrix-free (vectorized slicing) and as an explicit CSR matrix;
the two must agree to near machine precision.

The double curl is built by composing the two curls rather than
transcribing a block table: the composition is unambiguous and is what
the diagonalization in :mod:`flashmp.transform` validates.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .grid import Box, FieldVector

_AXES = ("x", "y", "z")
# numpy axis of the (nz, ny, nx) component layout for each physical axis
_NP_AXIS = {"x": 2, "y": 1, "z": 0}


@dataclass(frozen=True)
class OperatorParams:
    """Curl strength alpha = dt^2 / 4 and the box it acts on."""

    box: Box
    alpha: float = 0.25

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


class DifferenceMatrix:
    """1-D forward/backward difference with dense form and matrix-free apply."""

    def __init__(self, n: int, kind: str):
        if n < 1:
            raise ValueError("difference matrix size must be >= 1")
        if kind not in ("forward", "backward"):
            raise ValueError(f"kind must be 'forward' or 'backward', got {kind!r}")
        self.n = n
        self.kind = kind

    def dense(self) -> np.ndarray:
        D = -np.eye(self.n)
        idx = np.arange(self.n - 1)
        D[idx, idx + 1] = 1.0
        if self.kind == "backward":
            D = -D.T
        return D

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.empty_like(x)
        if self.kind == "forward":
            out[:-1] = x[1:] - x[:-1]
            out[-1] = -x[-1]
        else:
            out[1:] = x[1:] - x[:-1]
            out[0] = x[0]
        return out


def build_forward_difference(n: int) -> DifferenceMatrix:
    """Upper-bidiagonal difference: -1 on the diagonal, +1 above it."""
    return DifferenceMatrix(n, "forward")


def build_backward_difference(n: int) -> DifferenceMatrix:
    """Negated transpose of the forward difference."""
    return DifferenceMatrix(n, "backward")


def _diff_along(arr: np.ndarray, axis: int, kind: str) -> np.ndarray:
    """Apply the 1-D difference along one axis of a component array."""
    out = np.empty_like(arr)
    lead = (slice(None),) * axis
    if kind == "forward":
        out[lead + (slice(0, -1),)] = arr[lead + (slice(1, None),)] - arr[lead + (slice(0, -1),)]
        out[lead + (slice(-1, None),)] = -arr[lead + (slice(-1, None),)]
    else:
        out[lead + (slice(1, None),)] = arr[lead + (slice(1, None),)] - arr[lead + (slice(0, -1),)]
        out[lead + (slice(0, 1),)] = arr[lead + (slice(0, 1),)]
    return out


def _curl_comps(kind: str, comps: np.ndarray) -> np.ndarray:
    ex, ey, ez = comps

    def d(axis, arr):
        return _diff_along(arr, _NP_AXIS[axis], kind)

    out = np.empty_like(comps)
    out[0] = d("y", ez)
    out[0] -= d("z", ey)
    out[1] = d("z", ex)
    out[1] -= d("x", ez)
    out[2] = d("x", ey)
    out[2] -= d("y", ex)
    return out


def apply_curl(kind: str, E: FieldVector) -> FieldVector:
    """Curl with all-forward or all-backward differences.

    out_x = -D_z E_y + D_y E_z
    out_y =  D_z E_x - D_x E_z
    out_z = -D_y E_x + D_x E_y
    """
    if kind not in ("forward", "backward"):
        raise ValueError(f"kind must be 'forward' or 'backward', got {kind!r}")
    return FieldVector(E.box, _curl_comps(kind, E.components()).reshape(E.box.dof))


def apply_double_curl(E: FieldVector) -> FieldVector:
    """Backward-curl of the forward-curl of E."""
    out = _curl_comps("backward", _curl_comps("forward", E.components()))
    return FieldVector(E.box, out.reshape(E.box.dof))


def delta_boundary(box: Box, axis: str, i: int, j: int, k: int) -> int:
    """Boundary weight for one component/point, 1-based indices.

    For axis l the transverse pair (p, q) is (j, k) for x, (i, k) for y
    and (i, j) for z; the weight is 2 when p = q = 1, 1 when exactly one
    of them is 1, 0 otherwise.
    """
    if axis not in _AXES:
        raise ValueError(f"axis must be one of {_AXES}, got {axis!r}")
    if not (1 <= i <= box.nx and 1 <= j <= box.ny and 1 <= k <= box.nz):
        raise ValueError(f"index ({i},{j},{k}) out of range for box {box.extents}")
    p, q = {"x": (j, k), "y": (i, k), "z": (i, j)}[axis]
    return int(p == 1) + int(q == 1)


@lru_cache(maxsize=None)
def boundary_deltas(box: Box) -> np.ndarray:
    """All boundary weights as a (3, nz, ny, nx) array (component order x,y,z)."""
    ii = np.arange(box.nx)[None, None, :]
    jj = np.arange(box.ny)[None, :, None]
    kk = np.arange(box.nz)[:, None, None]
    zero = lambda a: (a == 0).astype(np.float64)
    d = np.empty((3, box.nz, box.ny, box.nx))
    d[0] = zero(jj) + zero(kk)
    d[1] = zero(ii) + zero(kk)
    d[2] = zero(ii) + zero(jj)
    d.setflags(write=False)
    return d


def apply_operator(params: OperatorParams, with_boundary: bool, E: FieldVector) -> FieldVector:
    """Matrix-free A = I + alpha*(double curl [+ boundary deltas])."""
    if E.box != params.box:
        raise ValueError(f"field box {E.box.extents} != operator box {params.box.extents}")
    comps = E.components()
    out = _curl_comps("backward", _curl_comps("forward", comps))
    if with_boundary:
        out += boundary_deltas(params.box) * comps
    return FieldVector(E.box, E.data + params.alpha * out.reshape(E.box.dof))


@dataclass
class SparseOperator:
    """Explicit CSR form of the field operator."""

    params: OperatorParams
    with_boundary: bool
    matrix: sp.csr_matrix

    @property
    def dim(self) -> int:
        return self.params.box.dof

    def apply(self, v) -> FieldVector:
        data = v.data if isinstance(v, FieldVector) else np.asarray(v, dtype=np.float64)
        return FieldVector(self.params.box, self.matrix @ data)

    def to_matrix_market(self, path) -> None:
        """Write the matrix in Matrix Market coordinate format."""
        from scipy.io import mmwrite

        mmwrite(path, self.matrix.tocoo())


def _sparse_axis_op(box: Box, axis: str, mat1d: sp.spmatrix) -> sp.csr_matrix:
    """Lift a 1-D operator to the box along one axis (x fastest layout)."""
    eye = {ax: sp.identity(n, format="csr") for ax, n in zip(_AXES, box.extents)}
    factors = {ax: eye[ax] for ax in _AXES}
    factors[axis] = mat1d
    return sp.kron(factors["z"], sp.kron(factors["y"], factors["x"], format="csr"), format="csr")


def _sparse_curl(box: Box, kind: str) -> sp.csr_matrix:
    d = {
        ax: _sparse_axis_op(box, ax, sp.csr_matrix(DifferenceMatrix(n, kind).dense()))
        for ax, n in zip(_AXES, box.extents)
    }
    Z = sp.csr_matrix((box.volume, box.volume))
    return sp.bmat(
        [
            [Z, -d["z"], d["y"]],
            [d["z"], Z, -d["x"]],
            [-d["y"], d["x"], Z],
        ],
        format="csr",
    )


@lru_cache(maxsize=32)
def _sparse_double_curl(box: Box) -> sp.csr_matrix:
    return (_sparse_curl(box, "backward") @ _sparse_curl(box, "forward")).tocsr()


def assemble_sparse(params: OperatorParams, with_boundary: bool) -> SparseOperator:
    """Assemble A = I + alpha*(M [+ deltas]) in CSR form."""
    box = params.box
    A = sp.identity(box.dof, format="csr") + params.alpha * _sparse_double_curl(box)
    if with_boundary:
        A = A + params.alpha * sp.diags(boundary_deltas(box).ravel(), format="csr")
    A = A.tocsr()
    A.sum_duplicates()
    return SparseOperator(params, with_boundary, A)
