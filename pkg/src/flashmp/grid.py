"""Boxes, field storage layouts and the component/grid-major permutation.

An electric field on an (nx, ny, nz) box is stored as one flat float64
array of length 3*nx*ny*nz.  Two layouts are used:

* component-major: all E_x values, then all E_y, then all E_z.  Within a
  component the x index runs fastest, then y, then z, so the linear index
  of (c, i, j, k) is c*nx*ny*nz + k*nx*ny + j*nx + i.
* grid-major: one (e_x, e_y, e_z) triplet per grid point, points ordered
  with x fastest.

The reorder between the two is a pure permutation; both directions are
exact (no arithmetic).  Grid points are plain collocated indices; no
staggering is implied.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_MAGIC = b"FMPF"
_VERSION = 1


@dataclass(frozen=True)
class Box:
    """Grid extents along x, y, z."""

    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError(f"box extents must be >= 1, got {self.extents}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def volume(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def dof(self) -> int:
        return 3 * self.volume

    def point_index(self, i: int, j: int, k: int) -> int:
        """Linear point index with x fastest (0-based)."""
        return k * self.nx * self.ny + j * self.nx + i


@dataclass
class FieldVector:
    """Three-component field in component-major layout."""

    box: Box
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        if self.data.size != self.box.dof:
            raise ValueError(
                f"expected {self.box.dof} values for box {self.box.extents}, "
                f"got {self.data.size}"
            )

    @classmethod
    def zeros(cls, box: Box) -> "FieldVector":
        return cls(box, np.zeros(box.dof))

    def component(self, c: int) -> np.ndarray:
        """View of component c as a (nz, ny, nx) array (x fastest in memory)."""
        b = self.box
        return self.data[c * b.volume:(c + 1) * b.volume].reshape(b.nz, b.ny, b.nx)

    def components(self) -> np.ndarray:
        """View of the full field as a (3, nz, ny, nx) array."""
        b = self.box
        return self.data.reshape(3, b.nz, b.ny, b.nx)

    def copy(self) -> "FieldVector":
        return FieldVector(self.box, self.data.copy())

    def validate(self) -> None:
        """Raise if any entry is NaN/Inf."""
        if not np.isfinite(self.data).all():
            raise ValueError("field contains non-finite values")


@dataclass
class GridMajorVector:
    """Three-component field as per-point (e_x, e_y, e_z) triplets."""

    box: Box
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        if self.data.size != self.box.dof:
            raise ValueError(
                f"expected {self.box.dof} values for box {self.box.extents}, "
                f"got {self.data.size}"
            )

    def points(self) -> np.ndarray:
        """View as a (volume, 3) array, one row per grid point."""
        return self.data.reshape(self.box.volume, 3)


def permute_to_grid_major(v: FieldVector) -> GridMajorVector:
    """Reorder component-major storage into per-point triplets.

    out[3*p + c] = v.component(c)[p] for every point p and component c.
    """
    comps = v.data.reshape(3, v.box.volume)
    return GridMajorVector(v.box, np.ascontiguousarray(comps.T).ravel())


def permute_to_component_major(v: GridMajorVector) -> FieldVector:
    """Exact inverse of :func:`permute_to_grid_major`."""
    pts = v.data.reshape(v.box.volume, 3)
    return FieldVector(v.box, np.ascontiguousarray(pts.T).ravel())


def dump_field(v: FieldVector, path) -> None:
    """Write the little-endian binary field format.

    Layout: magic "FMPF", u32 version=1, u32 nx, ny, nz, then
    3*nx*ny*nz float64 values in component-major order.
    """
    b = v.box
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<4I", _VERSION, b.nx, b.ny, b.nz))
        f.write(v.data.astype("<f8").tobytes())


def load_field(path) -> FieldVector:
    """Read a field written by :func:`dump_field`."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        version, nx, ny, nz = struct.unpack("<4I", f.read(16))
        if version != _VERSION:
            raise ValueError(f"unsupported field file version {version}")
        box = Box(nx, ny, nz)
        raw = f.read(8 * box.dof)
        if len(raw) != 8 * box.dof:
            raise ValueError("truncated field file")
        data = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return FieldVector(box, data)
