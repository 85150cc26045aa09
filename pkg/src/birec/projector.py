"""Calibrated X-ray forward projection, its exact adjoint, and baselines.

Rays are sampled with the midpoint rule at uniform arclength steps after
clipping to the volume's voxel-extent bounding box (voxel coordinates
[-0.5, n-0.5] per axis); pixel value = step * sum of trilinear samples.
The adjoint scatters the identical weights, so <Av, p> = <v, A^T p> holds
to rounding. Parallel and cone beams share one ray representation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import GvolError, UsageError
from .volume import Grid3, Volume

_GPRJ_MAGIC = b"GPRJ"
_GPRJ_VERSION = 1
_GPRJ_HEADER = struct.Struct("<4sIIIdd")

_UNIT_TOL = 1e-9
_ORTHO_TOL = 1e-6


def _as_unit(name: str, vec) -> tuple[float, float, float]:
    v = tuple(float(x) for x in vec)
    if len(v) != 3 or not all(np.isfinite(v)):
        raise UsageError(f"{name} must be a finite 3-vector, got {vec}")
    if abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
        raise UsageError(f"{name} must be a unit vector, |{name}| = {np.linalg.norm(v)!r}")
    return v


@dataclass(frozen=True)
class ProjectionGeometry:
    """One calibrated view: detector frame, beam model, sampling step.

    detector_origin is the world center of pixel (0, 0); pixel (iu, iv) is
    centered at detector_origin + iu*du*detector_u + iv*dv*detector_v.
    kind "cone" uses `source`; kind "parallel" uses unit `direction`.
    """

    kind: str
    detector_origin: tuple[float, float, float]
    detector_u: tuple[float, float, float]
    detector_v: tuple[float, float, float]
    nu: int
    nv: int
    du: float
    dv: float
    step: float
    source: tuple[float, float, float] | None = None
    direction: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("cone", "parallel"):
            raise UsageError(f"geometry kind must be 'cone' or 'parallel', got {self.kind!r}")
        object.__setattr__(self, "detector_origin", tuple(float(x) for x in self.detector_origin))
        object.__setattr__(self, "detector_u", _as_unit("detector_u", self.detector_u))
        object.__setattr__(self, "detector_v", _as_unit("detector_v", self.detector_v))
        if abs(np.dot(self.detector_u, self.detector_v)) >= _ORTHO_TOL:
            raise UsageError("detector_u and detector_v must be orthogonal")
        object.__setattr__(self, "nu", int(self.nu))
        object.__setattr__(self, "nv", int(self.nv))
        if self.nu < 1 or self.nv < 1:
            raise UsageError(f"nu, nv must be >= 1, got ({self.nu}, {self.nv})")
        for name in ("du", "dv", "step"):
            val = float(getattr(self, name))
            object.__setattr__(self, name, val)
            if not (val > 0.0 and np.isfinite(val)):
                raise UsageError(f"{name} must be > 0, got {val}")
        if self.kind == "cone":
            if self.source is None:
                raise UsageError("cone geometry requires a source position")
            object.__setattr__(self, "source", tuple(float(x) for x in self.source))
            object.__setattr__(self, "direction", None)
        else:
            if self.direction is None:
                raise UsageError("parallel geometry requires a beam direction")
            object.__setattr__(self, "direction", _as_unit("direction", self.direction))
            object.__setattr__(self, "source", None)

    def pixel_centers_world(self) -> np.ndarray:
        """World centers of all pixels, shape (nu, nv, 3)."""
        iu = np.arange(self.nu)[:, None, None]
        iv = np.arange(self.nv)[None, :, None]
        o = np.array(self.detector_origin)
        return o + iu * self.du * np.array(self.detector_u) + iv * self.dv * np.array(self.detector_v)


@dataclass(frozen=True, eq=False)
class Projection:
    """2D measurement: line integrals (mm * unitless), data shape (nu, nv)."""

    data: np.ndarray
    du: float
    dv: float
    geometry: ProjectionGeometry | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise UsageError(f"projection data must be 2D, got shape {np.shape(self.data)}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "du", float(self.du))
        object.__setattr__(self, "dv", float(self.dv))

    @property
    def nu(self) -> int:
        return self.data.shape[0]

    @property
    def nv(self) -> int:
        return self.data.shape[1]


@lru_cache(maxsize=64)
def _ray_table(geom: ProjectionGeometry, grid: Grid3):
    """Per-pixel rays in voxel coordinates, flattened u-fastest.

    Returns (ox, oy, oz, dx, dy, dz, t0, t1): origin (voxel coords),
    direction (voxel coords per mm of arclength), and the [t0, t1] mm
    interval clipped against the voxel-extent box. t1 <= t0 marks a miss.
    """
    spacing = np.array(grid.spacing)
    pix = geom.pixel_centers_world().reshape(-1, 3, order="F")
    if geom.kind == "parallel":
        d_world = np.broadcast_to(np.array(geom.direction), pix.shape)
        o_world = pix
    else:
        d_world = pix - np.array(geom.source)
        norms = np.linalg.norm(d_world, axis=1, keepdims=True)
        d_world = d_world / norms
        o_world = np.broadcast_to(np.array(geom.source), pix.shape)
    o_vox = grid.world_to_voxel(o_world)
    d_vox = d_world / spacing

    t0 = np.full(pix.shape[0], -np.inf)
    t1 = np.full(pix.shape[0], np.inf)
    for ax in range(3):
        lo = -0.5
        hi = grid.dims[ax] - 0.5
        d = d_vox[:, ax]
        o = o_vox[:, ax]
        eps = 1e-12
        moving = np.abs(d) > eps
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - o) / d
            tb = (hi - o) / d
        near = np.minimum(ta, tb)
        far = np.maximum(ta, tb)
        t0 = np.where(moving, np.maximum(t0, near), t0)
        t1 = np.where(moving, np.minimum(t1, far), t1)
        inside = (o >= lo) & (o <= hi)
        t1 = np.where(~moving & ~inside, -np.inf, t1)
    if geom.kind == "cone":
        t0 = np.maximum(t0, 0.0)
    miss = ~(t1 > t0)
    t0 = np.where(miss, 0.0, t0)
    t1 = np.where(miss, 0.0, t1)
    return tuple(
        np.ascontiguousarray(a)
        for a in (o_vox[:, 0], o_vox[:, 1], o_vox[:, 2], d_vox[:, 0], d_vox[:, 1], d_vox[:, 2], t0, t1)
    )


def project(v: Volume, geom: ProjectionGeometry) -> Projection:
    """Forward projection A(v): midpoint-rule ray integrals per pixel."""
    rays = _ray_table(geom, v.grid)
    out = np.zeros(geom.nu * geom.nv)
    _kernels.project_rays(v.data, *rays, geom.step, out)
    return Projection(out.reshape((geom.nu, geom.nv), order="F"), geom.du, geom.dv, geom)


def project_adjoint(residual: Projection, geom: ProjectionGeometry, target_grid: Grid3) -> Volume:
    """Exact transpose of project: scatter step * residual through ray weights."""
    if residual.data.shape != (geom.nu, geom.nv):
        raise UsageError(
            f"residual shape {residual.data.shape} does not match detector ({geom.nu}, {geom.nv})"
        )
    rays = _ray_table(geom, target_grid)
    gvol = np.zeros(target_grid.dims)
    flat = np.ascontiguousarray(residual.data.ravel(order="F"))
    _kernels.project_rays_adjoint(gvol, *rays, geom.step, flat)
    return Volume(target_grid, gvol)


def _detector_coords(geom: ProjectionGeometry, points: np.ndarray):
    """Project world points onto the detector; returns (a_pix, b_pix, valid)."""
    o = np.array(geom.detector_origin)
    u = np.array(geom.detector_u)
    vv = np.array(geom.detector_v)
    if geom.kind == "parallel":
        m = np.column_stack([u, vv, -np.array(geom.direction)])
        det = np.linalg.det(m)
        if abs(det) < 1e-12:
            zeros = np.zeros(points.shape[0])
            return zeros, zeros, np.zeros(points.shape[0], dtype=bool)
        sol = np.linalg.solve(m, (points - o).T).T
        a, b = sol[:, 0], sol[:, 1]
        valid = np.ones(points.shape[0], dtype=bool)
    else:
        src = np.array(geom.source)
        n = np.cross(u, vv)
        denom = (points - src) @ n
        numer = (o - src) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = numer / denom
        valid = (np.abs(denom) > 1e-12) & (t > 1e-9)
        t = np.where(valid, t, 0.0)
        y = src + t[:, None] * (points - src)
        a = (y - o) @ u
        b = (y - o) @ vv
    a_pix = a / geom.du
    b_pix = b / geom.dv
    valid &= (a_pix >= 0.0) & (a_pix <= geom.nu - 1) & (b_pix >= 0.0) & (b_pix <= geom.nv - 1)
    return a_pix, b_pix, valid


def backproject_average(projections, geoms, grid: Grid3) -> Volume:
    """Per-voxel mean of bilinearly sampled projection values (the baseline).

    Out-of-field views are excluded from a voxel's mean; a voxel covered by
    no view is 0.
    """
    projections = list(projections)
    geoms = list(geoms)
    if len(projections) == 0:
        raise UsageError("backproject_average requires at least one projection")
    if len(projections) != len(geoms):
        raise UsageError("projections and geometries must pair up")
    points = grid.voxel_centers_world().reshape(-1, 3)
    total = np.zeros(points.shape[0])
    count = np.zeros(points.shape[0])
    zeros = np.zeros(points.shape[0])
    for proj, geom in zip(projections, geoms):
        if proj.data.shape != (geom.nu, geom.nv):
            raise UsageError("projection data does not match its geometry's detector dims")
        a_pix, b_pix, valid = _detector_coords(geom, points)
        sampled = np.empty((points.shape[0], 1))
        field = proj.data.reshape(proj.data.shape + (1, 1))
        _kernels.field_sample(
            field,
            np.ascontiguousarray(np.where(valid, a_pix, 0.0)),
            np.ascontiguousarray(np.where(valid, b_pix, 0.0)),
            zeros,
            sampled,
        )
        total += np.where(valid, sampled[:, 0], 0.0)
        count += valid
    out = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return Volume(grid, out.reshape(grid.dims))


def default_biplanar(grid: Grid3) -> tuple[ProjectionGeometry, ProjectionGeometry]:
    """Two orthogonal parallel views: AP (+y) and lateral (+x).

    Detectors are centered on the volume, pitch = min spacing, sized to
    cover the volume footprint, step = 0.5 * min spacing.
    """
    pitch = min(grid.spacing)
    step = 0.5 * pitch
    ex, ey, ez = grid.extent_mm
    c = grid.center_world

    def _make(direction, u_axis, extent_u, extent_v):
        nu = int(np.ceil(extent_u / pitch))
        nv = int(np.ceil(extent_v / pitch))
        d = np.array(direction, dtype=float)
        u = np.array(u_axis, dtype=float)
        v_axis = np.array([0.0, 0.0, 1.0])
        offset = 0.5 * float(np.abs(d) @ np.array(grid.extent_mm)) + pitch
        origin = c + offset * d - (nu - 1) / 2.0 * pitch * u - (nv - 1) / 2.0 * pitch * v_axis
        return ProjectionGeometry(
            kind="parallel",
            detector_origin=tuple(origin),
            detector_u=tuple(u),
            detector_v=tuple(v_axis),
            nu=nu,
            nv=nv,
            du=pitch,
            dv=pitch,
            step=step,
            direction=tuple(d),
        )

    ap = _make((0.0, 1.0, 0.0), (1.0, 0.0, 0.0), ex, ez)
    lateral = _make((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), ey, ez)
    return ap, lateral


def write_gprj(path, proj: Projection) -> None:
    """Write the little-endian GPRJ format (f32 payload, u-fastest)."""
    header = _GPRJ_HEADER.pack(_GPRJ_MAGIC, _GPRJ_VERSION, proj.nu, proj.nv, proj.du, proj.dv)
    payload = proj.data.ravel(order="F").astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_gprj(path) -> Projection:
    """Read a GPRJ file; errors name the offending field."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != _GPRJ_MAGIC:
        raise GvolError(f"{path}: bad magic, expected GPRJ")
    if len(blob) < _GPRJ_HEADER.size:
        raise GvolError(f"{path}: truncated header")
    _, version, nu, nv, du, dv = _GPRJ_HEADER.unpack_from(blob)
    if version != _GPRJ_VERSION:
        raise GvolError(f"{path}: unsupported version {version}, expected {_GPRJ_VERSION}")
    if min(nu, nv) < 1:
        raise GvolError(f"{path}: invalid dims ({nu}, {nv})")
    expected = nu * nv * 4
    payload = blob[_GPRJ_HEADER.size :]
    if len(payload) < expected:
        raise GvolError(f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
    if len(payload) > expected:
        raise GvolError(f"{path}: payload size mismatch, expected {expected} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return Projection(data.reshape((nu, nv), order="F"), du, dv)


def geometry_to_json(geom: ProjectionGeometry) -> dict:
    doc = {
        "kind": geom.kind,
        "detector_origin": list(geom.detector_origin),
        "detector_u": list(geom.detector_u),
        "detector_v": list(geom.detector_v),
        "nu": geom.nu,
        "nv": geom.nv,
        "du": geom.du,
        "dv": geom.dv,
        "step": geom.step,
    }
    if geom.kind == "cone":
        doc["source"] = list(geom.source)
    else:
        doc["direction"] = list(geom.direction)
    return doc


def geometry_from_json(doc: dict) -> ProjectionGeometry:
    try:
        kind = doc["kind"]
        return ProjectionGeometry(
            kind=kind,
            detector_origin=tuple(doc["detector_origin"]),
            detector_u=tuple(doc["detector_u"]),
            detector_v=tuple(doc["detector_v"]),
            nu=doc["nu"],
            nv=doc["nv"],
            du=doc["du"],
            dv=doc["dv"],
            step=doc["step"],
            source=tuple(doc["source"]) if kind == "cone" else None,
            direction=tuple(doc["direction"]) if kind == "parallel" else None,
        )
    except KeyError as exc:
        raise GvolError(f"geometry JSON missing field {exc}") from exc


def write_geometry(path, geom: ProjectionGeometry) -> None:
    with open(path, "w") as fh:
        json.dump(geometry_to_json(geom), fh, indent=1)
        fh.write("\n")


def read_geometry(path) -> ProjectionGeometry:
    with open(path) as fh:
        return geometry_from_json(json.load(fh))
