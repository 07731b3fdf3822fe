"""SVD of the 1-D difference and the orthogonal field transform.

The forward difference factors as D = U S V^T with strictly positive
singular values (its determinant is +-1).  Because the backward
difference is -D^T = -V S U^T, one SVD per axis extent serves both
directions, and transforming each field component with the right mix of
U^T / V^T factors along the three axes turns the double curl into
independent 3x3 blocks per grid point (see :mod:`flashmp.subdomain`).

Per component the transform applies, innermost first,

    x-component:  U^T along x, V^T along y, V^T along z
    y-component:  V^T along x, U^T along y, V^T along z
    z-component:  V^T along x, V^T along y, U^T along z

and the inverse uses the untransposed factors.  Axis contractions are
single GEMMs on an axis-major reshape of the component (M = K = axis
extent, N = product of the other two); a naive triple-loop reference is
kept for tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import Box, FieldVector
from .instrument import NULL_TIMER
from .operators import build_forward_difference

_NP_AXIS = {"x": 2, "y": 1, "z": 0}


@dataclass(frozen=True)
class AxisSvd:
    """Orthogonal factors of the n x n forward difference."""

    n: int
    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray


@lru_cache(maxsize=None)
def svd_of_difference(n: int) -> AxisSvd:
    """SVD of the forward difference with a deterministic sign gauge.

    Signs are fixed so the first nonzero entry of each column of V is
    positive, flipping the matching column of U to preserve the product.
    Cached per extent: partitions reuse a handful of distinct sizes.
    """
    D = build_forward_difference(n).dense()
    U, S, Vt = np.linalg.svd(D)
    for c in range(n):
        lead = Vt[c, np.flatnonzero(np.abs(Vt[c]) > 1e-14)[0]]
        if lead < 0:
            Vt[c] = -Vt[c]
            U[:, c] = -U[:, c]
    for arr in (U, S, Vt):
        arr.setflags(write=False)
    return AxisSvd(n, U, S, Vt)


@dataclass(frozen=True)
class TransformSet:
    """Per-axis SVD factors for one box."""

    svd_x: AxisSvd
    svd_y: AxisSvd
    svd_z: AxisSvd

    @classmethod
    def for_box(cls, box: Box) -> "TransformSet":
        return cls(svd_of_difference(box.nx), svd_of_difference(box.ny), svd_of_difference(box.nz))


def contract_axis(axis: str, T: np.ndarray, F: np.ndarray, counter=None) -> np.ndarray:
    """Apply the square matrix T along one axis of a component array.

    F has shape (nz, ny, nx) with optional trailing batch axes.  The
    contraction is one GEMM after moving the contracted axis to the
    front; the flop counter, when given, is charged 2*n*n*N.
    """
    if axis not in _NP_AXIS:
        raise ValueError(f"axis must be 'x', 'y' or 'z', got {axis!r}")
    T = np.asarray(T)
    ax = _NP_AXIS[axis]
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"transform matrix must be square, got shape {T.shape}")
    if T.shape[0] != F.shape[ax]:
        raise ValueError(
            f"matrix size {T.shape[0]} does not match axis {axis!r} extent {F.shape[ax]}"
        )
    moved = np.moveaxis(F, ax, 0)
    flat = np.ascontiguousarray(moved).reshape(T.shape[0], -1)
    out = T @ flat
    if counter is not None:
        counter.gemm += 2 * T.shape[0] * flat.size
    return np.moveaxis(out.reshape(moved.shape), 0, ax)


def contract_axis_reference(axis: str, T: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Triple-loop contraction, kept as the slow oracle for tests."""
    nz, ny, nx = F.shape
    out = np.zeros_like(F)
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                if axis == "x":
                    out[k, j, i] = sum(T[i, m] * F[k, j, m] for m in range(nx))
                elif axis == "y":
                    out[k, j, i] = sum(T[j, m] * F[k, m, i] for m in range(ny))
                else:
                    out[k, j, i] = sum(T[k, m] * F[m, j, i] for m in range(nz))
    return out


def _component_factors(ts: TransformSet, inverse: bool):
    """(T_x, T_y, T_z) per component; forward uses U^T/V^T, inverse U/V."""
    ux, vx = ts.svd_x.U, ts.svd_x.Vt.T
    uy, vy = ts.svd_y.U, ts.svd_y.Vt.T
    uz, vz = ts.svd_z.U, ts.svd_z.Vt.T
    table = [
        (ux, vy, vz),  # x component
        (vx, uy, vz),  # y component
        (vx, vy, uz),  # z component
    ]
    if inverse:
        return table
    return [(tx.T, ty.T, tz.T) for tx, ty, tz in table]


def _transform_components(ts: TransformSet, comps: np.ndarray, inverse: bool,
                          counter=None, timer=NULL_TIMER) -> np.ndarray:
    """Transform a (3, nz, ny, nx, ...) component stack in place-free form."""
    out = np.empty_like(comps)
    with timer.phase("fast_solve"):
        for c, (tx, ty, tz) in enumerate(_component_factors(ts, inverse)):
            w = contract_axis("x", tx, comps[c], counter)
            w = contract_axis("y", ty, w, counter)
            out[c] = contract_axis("z", tz, w, counter)
    return out


def _field_shape(ts: TransformSet) -> tuple[int, int, int]:
    return (ts.svd_z.n, ts.svd_y.n, ts.svd_x.n)


def apply_transform(ts: TransformSet, E: FieldVector) -> FieldVector:
    """Forward orthogonal transform of all three components."""
    comps = E.data.reshape((3,) + _field_shape(ts))
    return FieldVector(E.box, _transform_components(ts, comps, inverse=False).ravel())


def apply_inverse_transform(ts: TransformSet, E: FieldVector) -> FieldVector:
    """Inverse of :func:`apply_transform` (transposed contractions)."""
    comps = E.data.reshape((3,) + _field_shape(ts))
    return FieldVector(E.box, _transform_components(ts, comps, inverse=True).ravel())
