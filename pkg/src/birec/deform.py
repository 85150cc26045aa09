"""Diffeomorphic deformation: velocity integration, warping, registration.

Fields store one 3-vector per node in mm. A DeformationField phi is a
pull-back map: the warped volume reads out(x) = v(x + phi(x)/spacing) at
every voxel center x (continuous voxel coordinates). A VelocityField u is
turned into phi by scaling and squaring: phi_0 = u / 2^steps, then
phi_{k+1}(x) = phi_k(x) + phi_k(x + phi_k(x)/spacing) repeated `steps`
times, which keeps the map invertible for smooth u.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import UsageError
from .volume import Grid3, Volume, read_gvol, resample, resample_adjoint, write_gvol


def _check_field(grid: Grid3, data) -> np.ndarray:
    data = np.ascontiguousarray(data, dtype=np.float64)
    if data.shape != grid.dims + (3,):
        raise UsageError(f"field data shape {data.shape} does not match grid {grid.dims} + (3,)")
    return data


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Stationary velocity, mm per unit integration time."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _check_field(self.grid, self.data))


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Pull-back displacement phi, mm: target x reads source x + phi(x)."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _check_field(self.grid, self.data))


@lru_cache(maxsize=32)
def _base_coords(dims: tuple[int, int, int]):
    ii, jj, kk = np.meshgrid(
        np.arange(dims[0], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[2], dtype=np.float64),
        indexing="ij",
    )
    return (
        np.ascontiguousarray(ii.ravel()),
        np.ascontiguousarray(jj.ravel()),
        np.ascontiguousarray(kk.ravel()),
    )


def _sample_positions(grid: Grid3, disp_flat: np.ndarray):
    bx, by, bz = _base_coords(grid.dims)
    sx, sy, sz = grid.spacing
    return (
        bx + disp_flat[:, 0] / sx,
        by + disp_flat[:, 1] / sy,
        bz + disp_flat[:, 2] / sz,
    )


def integrate_velocity(u: VelocityField, steps: int = 6) -> DeformationField:
    """Scaling-and-squaring exponential of the stationary velocity."""
    phi, _ = _integrate_cache(u, steps)
    return DeformationField(u.grid, phi.reshape(u.grid.dims + (3,)))


def _integrate_cache(u: VelocityField, steps: int):
    """Returns (phi_flat, [phi_0 ... phi_{steps-1}]) for VJP reuse."""
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}")
    grid = u.grid
    n = grid.n_voxels
    phi = (u.data / float(2**steps)).reshape(n, 3).copy()
    chain = []
    sampled = np.empty((n, 3))
    for _ in range(steps):
        chain.append(phi)
        px, py, pz = _sample_positions(grid, phi)
        _kernels.field_sample(phi.reshape(grid.dims + (3,)), px, py, pz, sampled)
        phi = phi + sampled
    return phi, chain


def integrate_velocity_vjp(u: VelocityField, steps: int, upstream: np.ndarray, chain=None) -> np.ndarray:
    """Gradient of integrate_velocity: upstream (grid + (3,)) -> grad wrt u."""
    grid = u.grid
    n = grid.n_voxels
    if chain is None:
        _, chain = _integrate_cache(u, steps)
    g = np.ascontiguousarray(upstream, dtype=np.float64).reshape(n, 3)
    spacing = np.array(grid.spacing)
    for phi in reversed(chain):
        px, py, pz = _sample_positions(grid, phi)
        phi3d = phi.reshape(grid.dims + (3,))
        scat = np.zeros(grid.dims + (3,))
        _kernels.field_scatter_add(scat, px, py, pz, np.ascontiguousarray(g))
        pos_grad = np.empty((n, 3))
        _kernels.field_pos_grad(phi3d, px, py, pz, np.ascontiguousarray(g), pos_grad)
        g = g + scat.reshape(n, 3) + pos_grad / spacing
    return (g / float(2**steps)).reshape(grid.dims + (3,))


def warp(v: Volume, phi: DeformationField) -> Volume:
    """W(v, phi): pull-back resampling of v through the displacement."""
    if phi.grid != v.grid:
        raise UsageError("warp: the deformation must live on the volume's grid")
    n = v.grid.n_voxels
    px, py, pz = _sample_positions(v.grid, phi.data.reshape(n, 3))
    out = np.empty((n, 1))
    _kernels.field_sample(v.data.reshape(v.grid.dims + (1,)), px, py, pz, out)
    return Volume(v.grid, out[:, 0].reshape(v.grid.dims))


def warp_vjp(v: Volume, phi: DeformationField, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of warp wrt the volume data and the displacement (mm)."""
    if phi.grid != v.grid:
        raise UsageError("warp_vjp: the deformation must live on the volume's grid")
    up = upstream.data if isinstance(upstream, Volume) else np.asarray(upstream, dtype=np.float64)
    n = v.grid.n_voxels
    px, py, pz = _sample_positions(v.grid, phi.data.reshape(n, 3))
    up_flat = np.ascontiguousarray(up.reshape(n, 1))
    grad_v = np.zeros(v.grid.dims + (1,))
    _kernels.field_scatter_add(grad_v, px, py, pz, up_flat)
    pos_grad = np.empty((n, 3))
    _kernels.field_pos_grad(v.data.reshape(v.grid.dims + (1,)), px, py, pz, up_flat, pos_grad)
    grad_phi = pos_grad / np.array(v.grid.spacing)
    return grad_v[..., 0], grad_phi.reshape(v.grid.dims + (3,))


def smoothness_loss(u: VelocityField, lambda_d: float) -> tuple[float, np.ndarray]:
    """lambda_d * sum of squared forward differences of u, in voxel units."""
    data = u.data
    loss = 0.0
    grad = np.zeros_like(data)
    for ax in range(3):
        if data.shape[ax] < 2:
            continue
        d = np.diff(data, axis=ax)
        loss += float(np.sum(d * d))
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        grad[tuple(hi)] += 2.0 * d
        grad[tuple(lo)] -= 2.0 * d
    return lambda_d * loss, lambda_d * grad


def jacobian_det(phi: DeformationField) -> Volume:
    """det(I + d(phi/spacing)/dx) by central differences; border voxels = 1."""
    psi = phi.data / np.array(phi.grid.spacing)
    dims = phi.grid.dims
    det = np.ones(dims)
    if min(dims) < 3:
        return Volume(phi.grid, det)
    jac = np.empty((3, 3) + tuple(d - 2 for d in dims))
    inner = tuple(slice(1, -1) for _ in range(3))
    for b in range(3):
        for a in range(3):
            hi = [slice(1, -1)] * 3
            lo = [slice(1, -1)] * 3
            hi[b] = slice(2, None)
            lo[b] = slice(None, -2)
            jac[a, b] = (psi[tuple(hi) + (a,)] - psi[tuple(lo) + (a,)]) / 2.0
        jac[b, b] += 1.0
    det[inner] = (
        jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
        - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
        + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
    )
    return Volume(phi.grid, det)


def invert_displacement(phi: DeformationField, iters: int = 20) -> DeformationField:
    """Fixed-point inverse: psi with (id + psi) o (id + phi) ~ id."""
    grid = phi.grid
    n = grid.n_voxels
    psi = np.zeros((n, 3))
    sampled = np.empty((n, 3))
    phi3d = phi.data
    for _ in range(iters):
        px, py, pz = _sample_positions(grid, psi)
        _kernels.field_sample(phi3d, px, py, pz, sampled)
        psi = -sampled
    return DeformationField(grid, psi.reshape(grid.dims + (3,)))


def compose_displacements(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """Pull-back composition: (outer o inner)(x) = inner(x) + outer(x + inner(x))."""
    if outer.grid != inner.grid:
        raise UsageError("compose_displacements: grids must match")
    grid = outer.grid
    n = grid.n_voxels
    inner_flat = inner.data.reshape(n, 3)
    px, py, pz = _sample_positions(grid, inner_flat)
    sampled = np.empty((n, 3))
    _kernels.field_sample(outer.data, px, py, pz, sampled)
    return DeformationField(grid, (inner_flat + sampled).reshape(grid.dims + (3,)))


def upsample_velocity(u: VelocityField, grid: Grid3) -> VelocityField:
    """Trilinear per-component resampling of u onto another grid."""
    comps = [resample(Volume(u.grid, u.data[..., c]), grid).data for c in range(3)]
    return VelocityField(grid, np.stack(comps, axis=-1))


def control_grid(vol_grid: Grid3, divisor: int = 4) -> Grid3:
    """Coarse velocity grid covering the volume extent (default 1/4 res)."""
    dims = tuple(max(2, d // divisor) for d in vol_grid.dims)
    from .generative import scale_grid

    return scale_grid(vol_grid, dims)


@dataclass(frozen=True)
class RegisterConfig:
    lambda_s: float = 1.0
    lambda_d: float = 0.1
    steps: int = 6
    levels: int = 3
    iters: int = 60          # Adam iterations per level
    lr: float = 0.4          # mm per step scale
    control_divisor: int = 4  # finest control grid = volume dims / divisor
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(eq=False)
class RegisterResult:
    u: VelocityField
    objective_trace: list[float] = field(default_factory=list)
    budget_exhausted: bool = False


def register(v1: Volume, v2: Volume, cfg: RegisterConfig = RegisterConfig()) -> RegisterResult:
    """Estimate u with warp(v1, integrate(upsample(u))) ~ v2 (realizes D).

    Coarse-to-fine Adam over `levels` control-grid resolutions, minimizing
    lambda_s*||v2 - W(v1, Phi(u))||^2 + smoothness_loss(u). The reported
    trace is the best objective so far within each level (accepted
    iterates), and the returned u is the best fine-level iterate.
    """
    if v1.grid != v2.grid:
        raise UsageError("register: volumes must share a grid")
    vol_grid = v1.grid
    trace: list[float] = []
    u_data = None
    grid_prev = None
    last_improved = False
    for level in range(cfg.levels):
        divisor = cfg.control_divisor * 2 ** (cfg.levels - 1 - level)
        cgrid = control_grid(vol_grid, divisor)
        if u_data is None:
            u_data = np.zeros(cgrid.dims + (3,))
        else:
            u_data = upsample_velocity(VelocityField(grid_prev, u_data), cgrid).data
        grid_prev = cgrid
        m = np.zeros_like(u_data)
        vv = np.zeros_like(u_data)
        best_obj = np.inf
        best_u = u_data.copy()
        last_improved = False
        for it in range(cfg.iters):
            obj, grad = _register_objective(v1, v2, VelocityField(cgrid, u_data), cfg)
            if obj < best_obj:
                best_obj = obj
                best_u = u_data.copy()
                last_improved = it >= int(0.9 * cfg.iters)
            trace.append(best_obj)
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
            vv = cfg.beta2 * vv + (1.0 - cfg.beta2) * grad * grad
            t = it + 1
            mh = m / (1.0 - cfg.beta1**t)
            vh = vv / (1.0 - cfg.beta2**t)
            u_data = u_data - cfg.lr * mh / (np.sqrt(vh) + cfg.eps)
        u_data = best_u
    return RegisterResult(VelocityField(grid_prev, u_data), trace, budget_exhausted=last_improved)


def _register_objective(v1: Volume, v2: Volume, u: VelocityField, cfg: RegisterConfig):
    vol_grid = v1.grid
    u_full = upsample_velocity(u, vol_grid)
    phi_flat, chain = _integrate_cache(u_full, cfg.steps)
    phi = DeformationField(vol_grid, phi_flat.reshape(vol_grid.dims + (3,)))
    warped = warp(v1, phi)
    r = warped.data - v2.data
    sim = cfg.lambda_s * float(np.sum(r * r))
    smooth, g_smooth = smoothness_loss(u, cfg.lambda_d)
    _, g_phi = warp_vjp(v1, phi, 2.0 * cfg.lambda_s * r)
    g_ufull = integrate_velocity_vjp(u_full, cfg.steps, g_phi, chain)
    g_u = np.stack(
        [resample_adjoint(g_ufull[..., c], u.grid, vol_grid) for c in range(3)], axis=-1
    )
    return sim + smooth, g_u + g_smooth


def spatial_transform(v1: Volume, u: VelocityField, steps: int = 6) -> tuple[Volume, DeformationField]:
    """S(v1, .): upsample u to the volume grid, integrate, warp. Returns both."""
    phi = integrate_velocity(upsample_velocity(u, v1.grid), steps)
    return warp(v1, phi), phi


def save_field(dir_path, prefix: str, fld, kind: str) -> None:
    """Three GVOL components plus a manifest recording grid and convention."""
    os.makedirs(dir_path, exist_ok=True)
    names = [f"{prefix}_{ax}.gvol" for ax in "xyz"]
    for c, name in enumerate(names):
        write_gvol(os.path.join(dir_path, name), Volume(fld.grid, np.ascontiguousarray(fld.data[..., c])))
    doc = {
        "format": "birec-field",
        "kind": kind,
        "convention": "pull-back displacement, mm" if kind == "deformation" else "stationary velocity, mm",
        "components": names,
        "grid": {"dims": list(fld.grid.dims), "spacing": list(fld.grid.spacing), "origin": list(fld.grid.origin)},
    }
    with open(os.path.join(dir_path, f"{prefix}.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_field(dir_path, prefix: str):
    with open(os.path.join(dir_path, f"{prefix}.json")) as fh:
        doc = json.load(fh)
    comps = [read_gvol(os.path.join(dir_path, name)) for name in doc["components"]]
    data = np.stack([c.data for c in comps], axis=-1)
    grid = comps[0].grid
    if doc["kind"] == "velocity":
        return VelocityField(grid, data)
    return DeformationField(grid, data)
