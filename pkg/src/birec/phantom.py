"""Procedural head-and-neck phantoms and longitudinal test cases.

A phantom is a stack of analytic primitives (superellipsoid head, skull
shell, mandible capsules, airway, mouth cavity, larynx tube pair, optional
tumor) rasterized with 1-voxel linear edge falloff. Longitudinal change is
an analytic pull-back map G composed as twist o jaw o compression with the
rigid offset applied last in the forward direction (innermost in G); the
changed volume is re-rasterized at G(x), so the returned ground-truth
displacement field phi(x) = G(x) - x is exact, with no interpolation blur.
The tumor is re-rasterized at its moved center and scaled radius rather
than deformed, making that intensity change genuinely non-diffeomorphic.

All world coordinates are mm. Parameter ranges are calibrated for the
default 128 mm cube extent and scale linearly with other extents.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .deform import DeformationField, jacobian_det, save_field
from .errors import DataError, UsageError
from .metrics import dice, psnr
from .projector import (
    Projection,
    default_biplanar,
    geometry_from_json,
    geometry_to_json,
    project,
    read_gprj,
    write_gprj,
)
from .volume import Grid3, Volume, read_gvol, write_gvol

REFERENCE_EXTENT_MM = 128.0

MAX_TWIST_DEG = 8.0
MAX_JAW_DEG = 10.0
COMPRESSION_RANGE = (0.85, 1.0)
TUMOR_SCALE_RANGE = (0.5, 1.5)
MAX_RIGID_ROT_DEG = 5.0
MAX_RIGID_TRANS_MM = 5.0


def default_grid(n: int = 64) -> Grid3:
    """Cubic grid spanning the reference 128 mm extent, centered at 0."""
    if n < 2:
        raise UsageError(f"grid side must be >= 2, got {n}")
    sp = REFERENCE_EXTENT_MM / n
    return Grid3((n, n, n), (sp, sp, sp), (-(n - 1) / 2.0 * sp,) * 3)


@dataclass(frozen=True)
class PhantomParams:
    """Uniform draw ranges (mm / unitless) for every primitive.

    Positions are relative to the grid center; everything scales with the
    grid extent. Intensities are normalized attenuation in [0, 1].
    """

    head_a: tuple = (38.0, 46.0)
    head_b: tuple = (42.0, 50.0)
    head_c: tuple = (44.0, 52.0)
    head_cz: tuple = (0.0, 6.0)
    head_exp: tuple = (2.2, 3.2)
    skull_cy: tuple = (-4.0, 4.0)
    skull_cz: tuple = (14.0, 22.0)
    skull_a: tuple = (26.0, 32.0)
    skull_b: tuple = (30.0, 36.0)
    skull_c: tuple = (24.0, 30.0)
    skull_thickness: tuple = (4.0, 6.0)
    mand_hinge_x: tuple = (26.0, 32.0)
    mand_hinge_y: tuple = (-14.0, -6.0)
    mand_hinge_z: tuple = (-2.0, 6.0)
    mand_chin_y: tuple = (28.0, 36.0)
    mand_chin_z: tuple = (-20.0, -12.0)
    mand_radius: tuple = (3.5, 5.0)
    airway_y: tuple = (-8.0, 0.0)
    airway_zbot: tuple = (-50.0, -44.0)
    airway_ztop: tuple = (8.0, 18.0)
    airway_radius: tuple = (4.0, 6.0)
    mouth_y: tuple = (16.0, 24.0)
    mouth_z: tuple = (-14.0, -6.0)
    mouth_a: tuple = (10.0, 14.0)
    mouth_b: tuple = (12.0, 16.0)
    mouth_c: tuple = (6.0, 9.0)
    larynx_dx: tuple = (5.0, 8.0)
    larynx_y: tuple = (-4.0, 4.0)
    larynx_zbot: tuple = (-44.0, -38.0)
    larynx_ztop: tuple = (-14.0, -8.0)
    larynx_radius: tuple = (3.0, 4.5)
    tumor_x: tuple = (-18.0, 18.0)
    tumor_y: tuple = (-10.0, 14.0)
    tumor_z: tuple = (-36.0, -6.0)
    tumor_radius: tuple = (5.0, 9.0)
    tumor_prob: float = 1.0
    soft_intensity: float = 0.45
    bone_intensity: float = 0.85
    mouth_intensity: float = 0.08
    larynx_intensity: float = 0.05
    air_intensity: float = 0.0
    intensity_jitter: float = 0.02
    edge_voxels: float = 1.0

    def __post_init__(self):
        for name, rng in asdict(self).items():
            if isinstance(rng, tuple):
                if len(rng) != 2 or rng[0] > rng[1]:
                    raise UsageError(f"{name} must be a (lo, hi) range, got {rng}")
        for name in ("soft_intensity", "bone_intensity", "mouth_intensity", "larynx_intensity", "air_intensity"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise UsageError(f"{name} must lie in [0, 1], got {val}")
        if not 0.0 <= self.tumor_prob <= 1.0:
            raise UsageError(f"tumor_prob must lie in [0, 1], got {self.tumor_prob}")


# ------------------------------------------------------------- primitives

def _sdf_superellipsoid(pts, center, half, exp):
    rel = np.abs(pts - center) / half
    r = np.sum(rel**exp, axis=1) ** (1.0 / exp)
    return (r - 1.0) * float(np.mean(half))


def _sdf_shell(pts, center, half, thickness):
    outer = _sdf_superellipsoid(pts, center, half, 2.0)
    inner = _sdf_superellipsoid(pts, center, half - thickness, 2.0)
    return np.maximum(outer, -inner)


def _sdf_capsule(pts, p0, p1, radius):
    d = p1 - p0
    t = np.clip((pts - p0) @ d / float(d @ d), 0.0, 1.0)
    closest = p0 + t[:, None] * d
    return np.linalg.norm(pts - closest, axis=1) - radius


def _sdf_sphere(pts, center, radius):
    return np.linalg.norm(pts - center, axis=1) - radius


def _primitive_sdfs(draw: dict, pts: np.ndarray) -> dict:
    """Signed distances of every primitive at pts, keyed by name."""
    a = np.asarray
    out = {}
    out["head"] = _sdf_superellipsoid(
        pts, a(draw["head_center"]), a(draw["head_half"]), draw["head_exp"]
    )
    out["skull"] = _sdf_shell(
        pts, a(draw["skull_center"]), a(draw["skull_half"]), draw["skull_thickness"]
    )
    chin = a(draw["mand_chin"])
    out["mandible_l"] = _sdf_capsule(pts, a(draw["mand_hinge_l"]), chin, draw["mand_radius"])
    out["mandible_r"] = _sdf_capsule(pts, a(draw["mand_hinge_r"]), chin, draw["mand_radius"])
    out["mouth"] = _sdf_superellipsoid(pts, a(draw["mouth_center"]), a(draw["mouth_half"]), 2.0)
    out["airway"] = _sdf_capsule(pts, a(draw["airway_bot"]), a(draw["airway_top"]), draw["airway_radius"])
    out["larynx_l"] = _sdf_capsule(pts, a(draw["larynx_l_bot"]), a(draw["larynx_l_top"]), draw["larynx_radius"])
    out["larynx_r"] = _sdf_capsule(pts, a(draw["larynx_r_bot"]), a(draw["larynx_r_top"]), draw["larynx_radius"])
    return out


_PAINT_ORDER = ("head", "skull", "mandible_l", "mandible_r", "mouth", "airway", "larynx_l", "larynx_r")


def _paint(base_pts, draw, edge_mm, tumor_pts=None, tumor_center=None, tumor_radius=None):
    """Alpha-composited rasterization; returns (values, mouth_in, larynx_in).

    Base primitives are evaluated at base_pts (pre-anatomy positions); the
    tumor, when given, is evaluated at tumor_pts (its own frame) so a
    changed case can re-rasterize it independently of the deformation.
    """
    sdfs = _primitive_sdfs(draw, base_pts)
    intensity = {
        "head": draw["soft_intensity"],
        "skull": draw["bone_intensity"],
        "mandible_l": draw["bone_intensity"],
        "mandible_r": draw["bone_intensity"],
        "mouth": draw["mouth_intensity"],
        "airway": draw["air_intensity"],
        "larynx_l": draw["larynx_intensity"],
        "larynx_r": draw["larynx_intensity"],
    }
    vals = np.full(base_pts.shape[0], draw["air_intensity"])
    for name in _PAINT_ORDER:
        alpha = np.clip(0.5 - sdfs[name] / edge_mm, 0.0, 1.0)
        vals = vals * (1.0 - alpha) + intensity[name] * alpha
    if tumor_center is not None:
        d_t = _sdf_sphere(tumor_pts, np.asarray(tumor_center), tumor_radius)
        alpha = np.clip(0.5 - d_t / edge_mm, 0.0, 1.0)
        vals = vals * (1.0 - alpha) + draw["tumor_intensity"] * alpha
    mouth_in = sdfs["mouth"] < 0.0
    larynx_in = np.minimum(sdfs["larynx_l"], sdfs["larynx_r"]) < 0.0
    return vals, mouth_in, larynx_in


# ------------------------------------------------------------------ draws

def _u(rng, lohi, scale=1.0, shrink=1.0):
    lo, hi = lohi
    mid = 0.5 * (lo + hi)
    lo = mid + (lo - mid) * shrink
    hi = mid + (hi - mid) * shrink
    return float(rng.uniform(lo, hi)) * scale


def _inside(lo_pt, hi_pt, box_half, margin):
    return bool(np.all(np.asarray(lo_pt) >= -box_half + margin) and np.all(np.asarray(hi_pt) <= box_half - margin))


def _draw_phantom(rng, params: PhantomParams, scale: float, box_half: np.ndarray, margin: float) -> dict:
    """One concrete parameter draw; shrinks and retries any primitive that
    would leave the grid, failing after 10 attempts."""
    p = params
    draw = {}

    def attempt(name, make_fn):
        for k in range(10):
            entry, lo_pt, hi_pt = make_fn(0.9**k)
            if _inside(lo_pt, hi_pt, box_half, margin):
                draw.update(entry)
                return
        raise DataError(f"phantom primitive '{name}' left the grid after 10 retries")

    def head(shrink):
        half = np.array([_u(rng, p.head_a, scale, shrink), _u(rng, p.head_b, scale, shrink), _u(rng, p.head_c, scale, shrink)])
        center = np.array([0.0, 0.0, _u(rng, p.head_cz, scale, shrink)])
        entry = {"head_center": center.tolist(), "head_half": half.tolist(), "head_exp": _u(rng, p.head_exp)}
        return entry, center - half, center + half

    def skull(shrink):
        center = np.array([0.0, _u(rng, p.skull_cy, scale, shrink), _u(rng, p.skull_cz, scale, shrink)])
        half = np.array([_u(rng, p.skull_a, scale, shrink), _u(rng, p.skull_b, scale, shrink), _u(rng, p.skull_c, scale, shrink)])
        entry = {"skull_center": center.tolist(), "skull_half": half.tolist(), "skull_thickness": _u(rng, p.skull_thickness, scale, shrink)}
        return entry, center - half, center + half

    def mandible(shrink):
        hx = _u(rng, p.mand_hinge_x, scale, shrink)
        hy = _u(rng, p.mand_hinge_y, scale, shrink)
        hz = _u(rng, p.mand_hinge_z, scale, shrink)
        chin = np.array([0.0, _u(rng, p.mand_chin_y, scale, shrink), _u(rng, p.mand_chin_z, scale, shrink)])
        r = _u(rng, p.mand_radius, scale, shrink)
        ends = np.array([[hx, hy, hz], [-hx, hy, hz], chin])
        entry = {
            "mand_hinge_l": [-hx, hy, hz], "mand_hinge_r": [hx, hy, hz],
            "mand_chin": chin.tolist(), "mand_radius": r,
        }
        return entry, ends.min(axis=0) - r, ends.max(axis=0) + r

    def airway(shrink):
        y = _u(rng, p.airway_y, scale, shrink)
        bot = np.array([0.0, y, _u(rng, p.airway_zbot, scale, shrink)])
        top = np.array([0.0, y, _u(rng, p.airway_ztop, scale, shrink)])
        r = _u(rng, p.airway_radius, scale, shrink)
        entry = {"airway_bot": bot.tolist(), "airway_top": top.tolist(), "airway_radius": r}
        lo = np.minimum(bot, top) - r
        hi = np.maximum(bot, top) + r
        return entry, lo, hi

    def mouth(shrink):
        center = np.array([0.0, _u(rng, p.mouth_y, scale, shrink), _u(rng, p.mouth_z, scale, shrink)])
        half = np.array([_u(rng, p.mouth_a, scale, shrink), _u(rng, p.mouth_b, scale, shrink), _u(rng, p.mouth_c, scale, shrink)])
        entry = {"mouth_center": center.tolist(), "mouth_half": half.tolist()}
        return entry, center - half, center + half

    def larynx(shrink):
        dx = _u(rng, p.larynx_dx, scale, shrink)
        y = _u(rng, p.larynx_y, scale, shrink)
        zb = _u(rng, p.larynx_zbot, scale, shrink)
        zt = _u(rng, p.larynx_ztop, scale, shrink)
        r = _u(rng, p.larynx_radius, scale, shrink)
        entry = {
            "larynx_l_bot": [-dx, y, zb], "larynx_l_top": [-dx, y, zt],
            "larynx_r_bot": [dx, y, zb], "larynx_r_top": [dx, y, zt],
            "larynx_radius": r,
        }
        return entry, np.array([-dx - r, y - r, zb - r]), np.array([dx + r, y + r, zt + r])

    attempt("head", head)
    attempt("skull", skull)
    attempt("mandible", mandible)
    attempt("airway", airway)
    attempt("mouth", mouth)
    attempt("larynx", larynx)

    draw["soft_intensity"] = p.soft_intensity + float(rng.uniform(-p.intensity_jitter, p.intensity_jitter))
    draw["bone_intensity"] = p.bone_intensity + float(rng.uniform(-p.intensity_jitter, p.intensity_jitter))
    draw["mouth_intensity"] = p.mouth_intensity
    draw["larynx_intensity"] = p.larynx_intensity
    draw["air_intensity"] = p.air_intensity
    draw["tumor_intensity"] = draw["soft_intensity"] + 0.05

    if rng.uniform() < p.tumor_prob:
        def tumor(shrink):
            # keep clear of the airway and larynx tubes so the lesion
            # reads as a distinct soft-tissue mass
            for _k in range(10):
                c = np.array([
                    _u(rng, p.tumor_x, scale, shrink),
                    _u(rng, p.tumor_y, scale, shrink),
                    _u(rng, p.tumor_z, scale, shrink),
                ])
                r = _u(rng, p.tumor_radius, scale, shrink)
                clearance = r + draw["airway_radius"] + 2.0 * scale
                pt = c[None, :]
                near_air = _sdf_capsule(pt, np.asarray(draw["airway_bot"]), np.asarray(draw["airway_top"]), 0.0)[0]
                near_lar = min(
                    _sdf_capsule(pt, np.asarray(draw["larynx_l_bot"]), np.asarray(draw["larynx_l_top"]), 0.0)[0],
                    _sdf_capsule(pt, np.asarray(draw["larynx_r_bot"]), np.asarray(draw["larynx_r_top"]), 0.0)[0],
                )
                if near_air > clearance and near_lar > clearance:
                    break
            entry = {"tumor_center": c.tolist(), "tumor_radius": r}
            return entry, c - r, c + r

        attempt("tumor", tumor)
    return draw


@dataclass(eq=False)
class Phantom:
    """A generated phantom: volume, exact structure masks, and its draw."""

    volume: Volume
    masks: dict
    metadata: dict


def generate_phantom(seed: int, params: PhantomParams | None = None, grid: Grid3 | None = None) -> Phantom:
    """Deterministic rasterization of one seeded primitive draw."""
    params = params or PhantomParams()
    grid = grid or default_grid()
    rng = np.random.default_rng(seed)
    scale = min(grid.extent_mm) / REFERENCE_EXTENT_MM
    edge = params.edge_voxels * min(grid.spacing)
    box_half = np.asarray(grid.extent_mm) / 2.0
    draw = _draw_phantom(rng, params, scale, box_half, margin=edge)
    center = grid.center_world
    pts = grid.voxel_centers_world().reshape(-1, 3) - center
    tumor_kw = {}
    if "tumor_center" in draw:
        tumor_kw = {"tumor_pts": pts, "tumor_center": draw["tumor_center"], "tumor_radius": draw["tumor_radius"]}
    vals, mouth_in, larynx_in = _paint(pts, draw, edge, **tumor_kw)
    dims = grid.dims
    return Phantom(
        Volume(grid, vals.reshape(dims)),
        {
            "mouth": Volume(grid, mouth_in.astype(np.float64).reshape(dims)),
            "larynx": Volume(grid, larynx_in.astype(np.float64).reshape(dims)),
        },
        {"seed": int(seed), "scale": scale, "edge_mm": edge, "draw": draw},
    )


# ------------------------------------------------------- longitudinal change

@dataclass(frozen=True)
class LongitudinalChange:
    """Declared motion modes; all fields validated against the fixed ranges."""

    twist_deg: float = 0.0
    jaw_deg: float = 0.0
    compression: float = 1.0
    tumor_scale: float = 1.0
    rigid_rot_deg: float = 0.0
    rigid_axis: tuple = (0.0, 0.0, 1.0)
    rigid_t_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if abs(self.twist_deg) > MAX_TWIST_DEG:
            raise UsageError(f"|twist_deg| must be <= {MAX_TWIST_DEG}, got {self.twist_deg}")
        if abs(self.jaw_deg) > MAX_JAW_DEG:
            raise UsageError(f"|jaw_deg| must be <= {MAX_JAW_DEG}, got {self.jaw_deg}")
        if not COMPRESSION_RANGE[0] <= self.compression <= COMPRESSION_RANGE[1]:
            raise UsageError(f"compression must lie in {COMPRESSION_RANGE}, got {self.compression}")
        if not TUMOR_SCALE_RANGE[0] <= self.tumor_scale <= TUMOR_SCALE_RANGE[1]:
            raise UsageError(f"tumor_scale must lie in {TUMOR_SCALE_RANGE}, got {self.tumor_scale}")
        if not 0.0 <= self.rigid_rot_deg <= MAX_RIGID_ROT_DEG:
            raise UsageError(f"rigid_rot_deg must lie in [0, {MAX_RIGID_ROT_DEG}], got {self.rigid_rot_deg}")
        if np.linalg.norm(self.rigid_t_mm) > MAX_RIGID_TRANS_MM + 1e-9:
            raise UsageError(f"|rigid_t_mm| must be <= {MAX_RIGID_TRANS_MM}, got {self.rigid_t_mm}")
        axis = np.asarray(self.rigid_axis, dtype=np.float64)
        nrm = np.linalg.norm(axis)
        if self.rigid_rot_deg > 0 and nrm == 0:
            raise UsageError("rigid_axis must be nonzero when rigid_rot_deg > 0")
        if nrm > 0:
            object.__setattr__(self, "rigid_axis", tuple(axis / nrm))

    @property
    def is_identity(self) -> bool:
        return (
            self.twist_deg == 0.0
            and self.jaw_deg == 0.0
            and self.compression == 1.0
            and self.tumor_scale == 1.0
            and self.rigid_rot_deg == 0.0
            and tuple(self.rigid_t_mm) == (0.0, 0.0, 0.0)
        )


def sample_change(seed: int) -> LongitudinalChange:
    """A non-trivial change: every mode active at a meaningful magnitude."""
    rng = np.random.default_rng(seed)
    twist = float(rng.choice([-1.0, 1.0]) * rng.uniform(3.0, MAX_TWIST_DEG))
    jaw = float(rng.choice([-1.0, 1.0]) * rng.uniform(4.0, MAX_JAW_DEG))
    comp = float(rng.uniform(0.88, 0.98))
    tumor = float(1.0 + rng.choice([-1.0, 1.0]) * rng.uniform(0.15, 0.4))
    rot = float(rng.uniform(1.0, MAX_RIGID_ROT_DEG))
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    tdir = rng.standard_normal(3)
    tdir /= np.linalg.norm(tdir)
    t = tdir * rng.uniform(1.0, MAX_RIGID_TRANS_MM)
    return LongitudinalChange(twist, jaw, comp, tumor, rot, tuple(axis), tuple(t))


def _rodrigues(axis, angle_rad: float) -> np.ndarray:
    ax = np.asarray(axis, dtype=np.float64)
    ax = ax / np.linalg.norm(ax)
    k = np.array([[0.0, -ax[2], ax[1]], [ax[2], 0.0, -ax[0]], [-ax[1], ax[0], 0.0]])
    return np.eye(3) + math.sin(angle_rad) * k + (1.0 - math.cos(angle_rad)) * (k @ k)


def _change_maps(draw: dict, change: LongitudinalChange, scale: float):
    """Pull-back map G (post -> pre, grid-center frame) and its analytic
    inverse (exact except for a first-order jaw-weight approximation)."""
    twist = math.radians(change.twist_deg)
    jaw = math.radians(change.jaw_deg)
    comp = change.compression
    z_hi_t, z_lo_t = 10.0 * scale, -50.0 * scale
    z_hi_c, z_lo_c = 20.0 * scale, -50.0 * scale

    hinge_l = np.asarray(draw["mand_hinge_l"])
    hinge_r = np.asarray(draw["mand_hinge_r"])
    chin = np.asarray(draw["mand_chin"])
    hinge_mid = 0.5 * (hinge_l + hinge_r)
    jaw_center = 0.5 * (hinge_mid + chin)
    jaw_half = np.array([
        hinge_r[0] + 14.0 * scale,
        abs(chin[1] - hinge_mid[1]) * 0.7 + 14.0 * scale,
        22.0 * scale,
    ])
    rig = _rodrigues(change.rigid_axis, math.radians(change.rigid_rot_deg))
    t = np.asarray(change.rigid_t_mm, dtype=np.float64)

    def w_twist(z):
        return np.clip((z_hi_t - z) / (z_hi_t - z_lo_t), 0.0, 1.0)

    def w_comp(z):
        return np.clip((z_hi_c - z) / (z_hi_c - z_lo_c), 0.0, 1.0)

    def w_jaw(p):
        rel = (p - jaw_center) / jaw_half
        rho = np.sqrt(np.sum(rel * rel, axis=1))
        return np.clip((1.0 - rho) / 0.4, 0.0, 1.0)

    def rot_xy(p, theta):
        c, s = np.cos(theta), np.sin(theta)
        out = p.copy()
        out[:, 0] = c * p[:, 0] - s * p[:, 1]
        out[:, 1] = s * p[:, 0] + c * p[:, 1]
        return out

    def rot_about_x(p, theta, origin):
        rel = p - origin
        c, s = np.cos(theta), np.sin(theta)
        out = rel.copy()
        out[:, 1] = c * rel[:, 1] - s * rel[:, 2]
        out[:, 2] = s * rel[:, 1] + c * rel[:, 2]
        return out + origin

    hinge_origin = np.array([0.0, hinge_mid[1], hinge_mid[2]])

    def g_rigid(p):
        return (p - t) @ rig  # == rig.T applied row-wise

    def g_rigid_inv(p):
        return p @ rig.T + t

    def g_comp(p):
        k = 1.0 + (comp - 1.0) * w_comp(p[:, 2])
        out = p.copy()
        out[:, 0] = p[:, 0] / k
        out[:, 1] = p[:, 1] / k
        return out

    def g_comp_inv(p):
        k = 1.0 + (comp - 1.0) * w_comp(p[:, 2])
        out = p.copy()
        out[:, 0] = p[:, 0] * k
        out[:, 1] = p[:, 1] * k
        return out

    def g_jaw(p, sign=1.0):
        return rot_about_x(p, -sign * jaw * w_jaw(p), hinge_origin)

    def g_twist(p, sign=1.0):
        return rot_xy(p, sign * twist * w_twist(p[:, 2]))

    def forward(p):
        return g_twist(g_jaw(g_comp(g_rigid(p))))

    def inverse(p):
        return g_rigid_inv(g_comp_inv(g_jaw(g_twist(p, -1.0), -1.0)))

    return forward, inverse


def apply_longitudinal_change(
    phantom: Phantom,
    change: LongitudinalChange,
    seed: int = 0,
    include_tumor: bool = True,
):
    """Re-rasterize the phantom under the composed pull-back map.

    Returns (Volume, masks, gt_deformation). The deformation is exact by
    construction; a non-positive Jacobian determinant rejects the change.
    `seed` is accepted for interface stability; the mapping itself is
    deterministic. `include_tumor=False` rasterizes without the tumor (the
    hook used by the analytic self-consistency check).
    """
    draw = phantom.metadata["draw"]
    grid = phantom.volume.grid
    scale = phantom.metadata["scale"]
    edge = phantom.metadata["edge_mm"]
    center = grid.center_world
    pts = grid.voxel_centers_world().reshape(-1, 3) - center
    if change.is_identity:
        q = pts
    else:
        forward, _ = _change_maps(draw, change, scale)
        q = forward(pts)

    tumor_kw = {}
    if include_tumor and "tumor_center" in draw:
        c_pre = np.asarray(draw["tumor_center"])
        c_post = c_pre.copy()
        if not change.is_identity:
            forward, _ = _change_maps(draw, change, scale)
            for _ in range(30):
                c_post = c_post - (forward(c_post[None, :])[0] - c_pre)
        tumor_kw = {
            "tumor_pts": pts,
            "tumor_center": c_post.tolist(),
            "tumor_radius": draw["tumor_radius"] * change.tumor_scale,
        }
    vals, mouth_in, larynx_in = _paint(q, draw, edge, **tumor_kw)

    dims = grid.dims
    phi = DeformationField(grid, (q - pts).reshape(dims + (3,)))
    min_det = float(jacobian_det(phi).data.min())
    if not min_det > 0.0:
        raise DataError(f"change rejected: min Jacobian determinant {min_det:.4f} is not > 0")
    masks = {
        "mouth": Volume(grid, mouth_in.astype(np.float64).reshape(dims)),
        "larynx": Volume(grid, larynx_in.astype(np.float64).reshape(dims)),
    }
    return Volume(grid, vals.reshape(dims)), masks, phi


def inverse_gt_deformation(phantom: Phantom, change: LongitudinalChange) -> DeformationField:
    """Rasterized analytic inverse of the change's pull-back map."""
    grid = phantom.volume.grid
    center = grid.center_world
    pts = grid.voxel_centers_world().reshape(-1, 3) - center
    if change.is_identity:
        q = pts
    else:
        _, inverse = _change_maps(phantom.metadata["draw"], change, phantom.metadata["scale"])
        q = inverse(pts)
    return DeformationField(grid, (q - pts).reshape(grid.dims + (3,)))


# ------------------------------------------------------------------- cases

@dataclass(eq=False)
class Case:
    """One longitudinal evaluation unit: stale volume, changed ground truth,
    its two projections, structure masks on both ends, exact deformation."""

    v_minus: Volume
    v_gt: Volume
    projections: list
    geoms: list
    masks_pre: dict
    masks_gt: dict
    gt_deformation: DeformationField
    change: LongitudinalChange
    seed: int = 0


def make_case(phantom: Phantom, change: LongitudinalChange, geoms=None, seed: int = 0) -> Case:
    """Assemble a case and assert it is non-trivial at generation time."""
    grid = phantom.volume.grid
    geoms = list(geoms) if geoms is not None else list(default_biplanar(grid))
    v_gt, masks_gt, phi = apply_longitudinal_change(phantom, change, seed)
    projections = [project(v_gt, gm) for gm in geoms]
    if not change.is_identity:
        p = psnr(phantom.volume, v_gt)
        if not p < 35.0:
            raise DataError(f"generated case is too easy: PSNR(v_minus, v_gt) = {p:.2f} dB >= 35")
        if abs(change.jaw_deg) >= 1.0:
            d = dice(phantom.masks["mouth"], masks_gt["mouth"])
            if not d < 0.98:
                raise DataError(f"generated case is too easy: mouth Dice {d:.3f} >= 0.98")
        if abs(change.twist_deg) >= 1.0:
            d = dice(phantom.masks["larynx"], masks_gt["larynx"])
            if not d < 0.98:
                raise DataError(f"generated case is too easy: larynx Dice {d:.3f} >= 0.98")
    return Case(phantom.volume, v_gt, projections, geoms, dict(phantom.masks), masks_gt, phi, change, seed)


# -------------------------------------------------------------- persistence

def save_case(dir_path, case: Case) -> None:
    os.makedirs(os.path.join(dir_path, "masks"), exist_ok=True)
    write_gvol(os.path.join(dir_path, "v_minus.gvol"), case.v_minus)
    write_gvol(os.path.join(dir_path, "v_gt.gvol"), case.v_gt)
    for i, (proj, gm) in enumerate(zip(case.projections, case.geoms)):
        write_gprj(os.path.join(dir_path, f"proj_{i}.gprj"), proj)
        with open(os.path.join(dir_path, f"geom_{i}.json"), "w") as fh:
            json.dump(geometry_to_json(gm), fh, indent=1)
            fh.write("\n")
    for name, vol in case.masks_pre.items():
        write_gvol(os.path.join(dir_path, "masks", f"{name}_pre.gvol"), vol)
    for name, vol in case.masks_gt.items():
        write_gvol(os.path.join(dir_path, "masks", f"{name}_gt.gvol"), vol)
    save_field(os.path.join(dir_path, "gt_def"), "phi", case.gt_deformation, "deformation")
    doc = {"seed": case.seed, "n_views": len(case.projections), **asdict(case.change)}
    with open(os.path.join(dir_path, "change.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_case(dir_path) -> Case:
    from .deform import load_field

    with open(os.path.join(dir_path, "change.json")) as fh:
        doc = json.load(fh)
    seed = doc.pop("seed")
    n_views = doc.pop("n_views")
    doc["rigid_axis"] = tuple(doc["rigid_axis"])
    doc["rigid_t_mm"] = tuple(doc["rigid_t_mm"])
    change = LongitudinalChange(**doc)
    geoms = []
    projections = []
    for i in range(n_views):
        with open(os.path.join(dir_path, f"geom_{i}.json")) as fh:
            gm = geometry_from_json(json.load(fh))
        geoms.append(gm)
        pr = read_gprj(os.path.join(dir_path, f"proj_{i}.gprj"))
        projections.append(Projection(pr.data, pr.du, pr.dv, gm))
    masks_pre = {}
    masks_gt = {}
    for name in ("mouth", "larynx"):
        masks_pre[name] = read_gvol(os.path.join(dir_path, "masks", f"{name}_pre.gvol"))
        masks_gt[name] = read_gvol(os.path.join(dir_path, "masks", f"{name}_gt.gvol"))
    return Case(
        read_gvol(os.path.join(dir_path, "v_minus.gvol")),
        read_gvol(os.path.join(dir_path, "v_gt.gvol")),
        projections,
        geoms,
        masks_pre,
        masks_gt,
        load_field(os.path.join(dir_path, "gt_def"), "phi"),
        change,
        seed,
    )


def _case_seeds(master_seed: int, index: int) -> tuple[int, int]:
    phantom_seed = int(np.random.SeedSequence((master_seed, index, 0)).generate_state(1)[0])
    change_seed = int(np.random.SeedSequence((master_seed, index, 1)).generate_state(1)[0])
    return phantom_seed, change_seed


def generate_cohort(n: int, seed: int, out_dir, grid: Grid3 | None = None, params: PhantomParams | None = None) -> dict:
    """n independent cases under out_dir; returns (and writes) the manifest."""
    if n < 1:
        raise UsageError(f"n must be >= 1, got {n}")
    grid = grid or default_grid()
    params = params or PhantomParams()
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n):
        phantom_seed, change_seed = _case_seeds(seed, i)
        phantom = generate_phantom(phantom_seed, params, grid)
        change = sample_change(change_seed)
        case = make_case(phantom, change, seed=change_seed)
        name = f"case_{i:03d}"
        case_dir = os.path.join(out_dir, name)
        try:
            save_case(case_dir, case)
        except OSError as exc:
            raise DataError(f"failed to write case under {case_dir}: {exc}") from exc
        files = sorted(
            os.path.relpath(os.path.join(root, f), out_dir)
            for root, _dirs, fs in os.walk(case_dir)
            for f in fs
        )
        entries.append({
            "dir": name,
            "phantom_seed": phantom_seed,
            "change_seed": change_seed,
            "params": phantom.metadata["draw"],
            "change": asdict(case.change),
            "files": files,
        })
    manifest = {
        "n": n,
        "seed": seed,
        "grid": {"dims": list(grid.dims), "spacing": list(grid.spacing), "origin": list(grid.origin)},
        "cases": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest


def cohort_case_dirs(cohort_dir) -> list:
    with open(os.path.join(cohort_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    return [os.path.join(cohort_dir, entry["dir"]) for entry in manifest["cases"]]
