"""3D scalar grids: coordinate mapping, interpolation, resampling, GVOL I/O.

Conventions fixed here and used everywhere:
  - voxel (i, j, k) has its center at origin + (i, j, k) * spacing (world mm);
  - in-memory data is a float64 array of shape (nx, ny, nz) indexed [i, j, k];
  - serialized order is x-fastest, flat index i + nx*(j + ny*k);
  - sampling outside [0, n-1] per axis reads 0 (normalized air).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import DataError, GvolError, UsageError

HU_MIN = -1024.0
HU_MAX = 2000.0

_GVOL_MAGIC = b"GVOL"
_GVOL_VERSION = 1
_GVOL_HEADER = struct.Struct("<4sIIIIdddddd")


@dataclass(frozen=True)
class Grid3:
    """Regular 3D grid: dims (nx, ny, nz), spacing mm, origin mm.

    origin is the world position of the center of voxel (0, 0, 0).
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise UsageError(f"grid dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or any(not (s > 0.0 and np.isfinite(s)) for s in spacing):
            raise UsageError(f"grid spacing must be strictly positive, got {self.spacing}")
        if len(origin) != 3 or any(not np.isfinite(o) for o in origin):
            raise UsageError(f"grid origin must be finite, got {self.origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical edge lengths of the voxel-extent bounding box."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    @property
    def center_world(self) -> np.ndarray:
        """World position of the grid center."""
        return np.array(self.origin) + (np.array(self.dims) - 1.0) / 2.0 * np.array(self.spacing)

    def voxel_to_world(self, p):
        """Map continuous voxel coordinates (..., 3) to world mm."""
        p = np.asarray(p, dtype=np.float64)
        return p * np.array(self.spacing) + np.array(self.origin)

    def world_to_voxel(self, p):
        """Map world mm points (..., 3) to continuous voxel coordinates."""
        p = np.asarray(p, dtype=np.float64)
        return (p - np.array(self.origin)) / np.array(self.spacing)

    def voxel_centers_world(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (nx, ny, nz, 3)."""
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        return self.voxel_to_world(np.stack([ii, jj, kk], axis=-1))


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar field on a Grid3; data shape (nx, ny, nz), float64."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.shape != self.grid.dims:
            if data.ndim == 1 and data.size == self.grid.n_voxels:
                data = np.ascontiguousarray(data.reshape(self.grid.dims, order="F"))
            else:
                raise UsageError(
                    f"data shape {np.shape(self.data)} does not match grid dims {self.grid.dims}"
                )
        object.__setattr__(self, "data", data)


def normalize_hu(raw: Volume) -> Volume:
    """Map Hounsfield units to [0, 1] by clamp((x + 1024) / 3024, 0, 1)."""
    if not np.all(np.isfinite(raw.data)):
        raise DataError("normalize_hu: non-finite value in HU input data")
    out = np.clip((raw.data - HU_MIN) / (HU_MAX - HU_MIN), 0.0, 1.0)
    return Volume(raw.grid, out)


def trilinear_sample(v: Volume, p):
    """Trilinear interpolation of v at continuous voxel coordinates p (..., 3).

    Coordinates outside [0, n-1] per axis contribute 0 (zero padding).
    Returns a scalar for a single point, else an array of shape p.shape[:-1].
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 3:
        raise UsageError(f"sample points must have a trailing dimension of 3, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise UsageError("trilinear_sample: non-finite sample coordinate")
    pts = np.ascontiguousarray(p.reshape(-1, 3))
    out = np.empty((pts.shape[0], 1))
    field = v.data.reshape(v.grid.dims + (1,))
    _kernels.field_sample(field, pts[:, 0].copy(), pts[:, 1].copy(), pts[:, 2].copy(), out)
    if p.ndim == 1:
        return float(out[0, 0])
    return out[:, 0].reshape(p.shape[:-1])


# Snap source coordinates this close to a node onto it, so that resampling a
# grid onto itself (or any world-aligned grid) is an exact identity.
_SNAP = 1e-9


@lru_cache(maxsize=64)
def _resample_matrices(src: Grid3, dst: Grid3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-axis interpolation weight matrices W (n_dst, n_src).

    Trilinear interpolation on an axis-aligned grid pair is separable, so
    resampling is three banded matrix applications. Out-of-range neighbors
    are dropped (zero padding), matching trilinear_sample.
    """
    mats = []
    for ax in range(3):
        ns = src.dims[ax]
        nt = dst.dims[ax]
        world = np.arange(nt) * dst.spacing[ax] + dst.origin[ax]
        s = (world - src.origin[ax]) / src.spacing[ax]
        near = np.round(s)
        snap = np.abs(s - near) < _SNAP
        s[snap] = near[snap]
        i0 = np.floor(s).astype(np.int64)
        f = s - i0
        w = np.zeros((nt, ns))
        rows = np.arange(nt)
        for idx, wt in ((i0, 1.0 - f), (i0 + 1, f)):
            ok = (idx >= 0) & (idx < ns)
            w[rows[ok], idx[ok]] += wt[ok]
        mats.append(w)
    return tuple(mats)


def _apply_axis(arr: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, 0)
    out = w @ moved.reshape(moved.shape[0], -1)
    out = out.reshape((w.shape[0],) + moved.shape[1:])
    return np.moveaxis(out, 0, axis)


def resample(v: Volume, target: Grid3) -> Volume:
    """Sample v at every target voxel center (world-aligned trilinear)."""
    if target == v.grid:
        return Volume(target, v.data.copy())
    wx, wy, wz = _resample_matrices(v.grid, target)
    out = _apply_axis(_apply_axis(_apply_axis(v.data, wx, 0), wy, 1), wz, 2)
    return Volume(target, out)


def resample_adjoint(data: np.ndarray, src: Grid3, dst: Grid3) -> np.ndarray:
    """Transpose of resample as a linear map on the data array.

    data lives on dst (the resample output grid); the result lives on src.
    """
    wx, wy, wz = _resample_matrices(src, dst)
    return _apply_axis(_apply_axis(_apply_axis(data, wx.T, 0), wy.T, 1), wz.T, 2)


def write_gvol(path, v: Volume) -> None:
    """Write the little-endian GVOL format (f32 payload, x-fastest)."""
    nx, ny, nz = v.grid.dims
    header = _GVOL_HEADER.pack(
        _GVOL_MAGIC, _GVOL_VERSION, nx, ny, nz, *v.grid.spacing, *v.grid.origin
    )
    payload = v.data.ravel(order="F").astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_gvol(path) -> Volume:
    """Read a GVOL file; errors name the offending field."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != _GVOL_MAGIC:
        raise GvolError(f"{path}: bad magic, expected GVOL")
    if len(blob) < _GVOL_HEADER.size:
        raise GvolError(f"{path}: truncated header")
    _, version, nx, ny, nz, sx, sy, sz, ox, oy, oz = _GVOL_HEADER.unpack_from(blob)
    if version != _GVOL_VERSION:
        raise GvolError(f"{path}: unsupported version {version}, expected {_GVOL_VERSION}")
    if min(nx, ny, nz) < 1 or nx * ny * nz > 2**31:
        raise GvolError(f"{path}: invalid dims ({nx}, {ny}, {nz})")
    expected = nx * ny * nz * 4
    payload = blob[_GVOL_HEADER.size :]
    if len(payload) < expected:
        raise GvolError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}"
        )
    if len(payload) > expected:
        raise GvolError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    grid = Grid3((nx, ny, nz), (sx, sy, sz), (ox, oy, oz))
    return Volume(grid, data.reshape(grid.dims, order="F"))
