"""Recovery-quality metrics and per-case evaluation reports.

PSNR assumes the unit intensity range. SSIM is computed with a uniform
7x7x7 window over valid interior positions only. Residual rigid error is
measured by registering the recovered volume onto the ground truth with a
moment-initialized, gradient-refined 6-DoF fit; rotations are parameterized
about the volume center throughout, so translation components of two
transforms are directly comparable.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from . import _kernels
from .deform import warp
from .errors import UsageError
from .volume import Volume

PSNR_CAP_DB = 99.0


def _check_same_grid(a: Volume, b: Volume, what: str) -> None:
    if a.grid != b.grid:
        raise UsageError(f"{what} requires volumes on the same grid")


def psnr(a: Volume, b: Volume) -> float:
    """10 log10(1 / MSE) dB; +inf for identical volumes."""
    _check_same_grid(a, b, "psnr")
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr_capped(a: Volume, b: Volume) -> float:
    """psnr clamped to 99 dB so reports serialize cleanly."""
    return min(psnr(a, b), PSNR_CAP_DB)


def ssim3d(a: Volume, b: Volume, window: int = 7, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean local SSIM over all fully-inside window positions."""
    _check_same_grid(a, b, "ssim3d")
    if window < 2 or window % 2 == 0:
        raise UsageError(f"window must be an odd integer >= 3, got {window}")
    if any(d < window for d in a.grid.dims):
        raise UsageError(f"ssim3d needs dims >= window {window}, got {a.grid.dims}")
    m = window // 2
    sl = tuple(slice(m, d - m) for d in a.grid.dims)

    def local_mean(x):
        return uniform_filter(x, size=window, mode="constant")[sl]

    x = a.data
    y = b.data
    mu_x = local_mean(x)
    mu_y = local_mean(y)
    var_x = local_mean(x * x) - mu_x * mu_x
    var_y = local_mean(y * y) - mu_y * mu_y
    cov = local_mean(x * y) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def dice(a: Volume, b: Volume) -> float:
    """Overlap of 0/1 masks; two empty masks count as perfect agreement."""
    _check_same_grid(a, b, "dice")
    for name, v in (("first", a), ("second", b)):
        vals = np.unique(v.data)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise UsageError(f"dice: {name} volume is not 0/1 valued")
    na = float(a.data.sum())
    nb = float(b.data.sum())
    if na == 0.0 and nb == 0.0:
        return 1.0
    inter = float((a.data * b.data).sum())
    return 2.0 * inter / (na + nb)


# ------------------------------------------------------------------- rigid

def _skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _exp_so3(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = _skew(w)
    if theta < 1e-12:
        return np.eye(3) + k
    return np.eye(3) + math.sin(theta) / theta * k + (1.0 - math.cos(theta)) / theta**2 * (k @ k)


def geodesic_angle_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    """Rotation angle of r1 r2^T, in degrees."""
    tr = float(np.trace(r1 @ r2.T))
    return math.degrees(math.acos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Pull-back rigid map about the volume center: q = R (p - c) + c + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise UsageError("RigidTransform needs a 3x3 rotation and a 3-vector translation")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise UsageError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise UsageError("rotation matrix must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


def identity_transform() -> RigidTransform:
    return RigidTransform(np.eye(3), np.zeros(3))


def transform_rigid(v: Volume, xf: RigidTransform) -> Volume:
    """Resample v under the pull-back map (trilinear, zero outside)."""
    grid = v.grid
    c = grid.center_world
    pts = grid.voxel_centers_world().reshape(-1, 3)
    q = (pts - c) @ xf.rotation.T + c + xf.translation
    qv = grid.world_to_voxel(q)
    out = np.empty((qv.shape[0], 1))
    _kernels.field_sample(
        v.data.reshape(grid.dims + (1,)),
        np.ascontiguousarray(qv[:, 0]),
        np.ascontiguousarray(qv[:, 1]),
        np.ascontiguousarray(qv[:, 2]),
        out,
    )
    return Volume(grid, out[:, 0].reshape(grid.dims))


def rigid_error(est: RigidTransform, ref: RigidTransform) -> tuple[float, float]:
    """(rotation geodesic distance deg, translation distance mm).

    Meaningful because both transforms rotate about the volume center.
    """
    ang = geodesic_angle_deg(est.rotation, ref.rotation)
    return ang, float(np.linalg.norm(est.translation - ref.translation))


@dataclass(frozen=True)
class RigidRegisterConfig:
    iters: int = 150
    lr_rot: float = 0.004
    lr_trans: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.iters < 0:
            raise UsageError("iters must be >= 0")
        if self.lr_rot <= 0 or self.lr_trans <= 0:
            raise UsageError("learning rates must be > 0")


_EIG_GAP_TOL = 1e-6


def _moments(v: Volume):
    pts = v.grid.voxel_centers_world().reshape(-1, 3)
    mass = v.data.ravel()
    total = float(mass.sum())
    if total <= 0.0:
        return np.array(v.grid.center_world), np.eye(3), True
    centroid = (mass @ pts) / total
    rel = pts - centroid
    cov = (rel * mass[:, None]).T @ rel / total
    evals, evecs = np.linalg.eigh(cov)
    gaps = np.diff(evals)
    if np.any(gaps < _EIG_GAP_TOL * max(evals[-1], 1e-12)):
        return centroid, np.eye(3), True
    return centroid, evecs, False


def _ssd(a: Volume, b: Volume) -> float:
    return float(np.sum((a.data - b.data) ** 2))


def rigid_register(a: Volume, b: Volume, cfg: RigidRegisterConfig | None = None, return_details: bool = False):
    """Best rigid pull-back xf with a(R(p-c)+c+t) ~ b(p), least squares.

    Initialization aligns intensity centroids and principal inertia axes
    (the determinant +1 sign combination with the lowest SSD); degenerate
    inertia spectra fall back to identity axes and set a warning. Adam
    then refines a left-increment rotation vector and the translation.
    """
    cfg = cfg or RigidRegisterConfig()
    _check_same_grid(a, b, "rigid_register")
    grid = a.grid
    c = np.array(grid.center_world)
    warnings = []

    cent_a, axes_a, deg_a = _moments(a)
    cent_b, axes_b, deg_b = _moments(b)
    if deg_a or deg_b:
        warnings.append("degenerate inertia spectrum, falling back to identity axes")
        candidates = [np.eye(3)]
    else:
        candidates = []
        parity = np.linalg.det(axes_a) * np.linalg.det(axes_b)
        for signs in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]):
            s = np.diag(signs) if parity > 0 else np.diag([-x for x in signs])
            candidates.append(axes_a @ s @ axes_b.T)

    best_init = None
    best_score = math.inf
    for rot in candidates:
        t = cent_a - c - rot @ (cent_b - c)
        xf = RigidTransform(rot, t)
        score = _ssd(transform_rigid(a, xf), b)
        if score < best_score:
            best_score = score
            best_init = xf

    rot = best_init.rotation.copy()
    t = best_init.translation.copy()
    pts_rel = grid.voxel_centers_world().reshape(-1, 3) - c
    field = a.data.reshape(grid.dims + (1,))
    target = b.data.ravel()
    spacing = np.array(grid.spacing)

    m = np.zeros(6)
    vv = np.zeros(6)
    lr = np.array([cfg.lr_rot] * 3 + [cfg.lr_trans] * 3)
    best_rot, best_t, best_ssd = rot.copy(), t.copy(), best_score
    trace = []
    sampled = np.empty((pts_rel.shape[0], 1))
    pos_grad = np.empty((pts_rel.shape[0], 3))

    for it in range(cfg.iters):
        rotated = pts_rel @ rot.T
        q = rotated + c + t
        qv = (q - np.array(grid.origin)) / spacing
        px = np.ascontiguousarray(qv[:, 0])
        py = np.ascontiguousarray(qv[:, 1])
        pz = np.ascontiguousarray(qv[:, 2])
        _kernels.field_sample(field, px, py, pz, sampled)
        r = sampled[:, 0] - target
        ssd = float(r @ r)
        trace.append(ssd)
        if ssd < best_ssd:
            best_ssd = ssd
            best_rot, best_t = rot.copy(), t.copy()
        _kernels.field_pos_grad(field, px, py, pz, (2.0 * r)[:, None], pos_grad)
        g_mm = pos_grad / spacing
        grad_t = g_mm.sum(axis=0)
        grad_rot = np.cross(rotated, g_mm).sum(axis=0)
        g = np.concatenate([grad_rot, grad_t])
        tstep = it + 1
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        vv = cfg.beta2 * vv + (1.0 - cfg.beta2) * g * g
        mh = m / (1.0 - cfg.beta1**tstep)
        vh = vv / (1.0 - cfg.beta2**tstep)
        step = -lr * mh / (np.sqrt(vh) + cfg.eps)
        rot = _exp_so3(step[:3]) @ rot
        t = t + step[3:]

    if cfg.iters > 0:
        final = RigidTransform(_project_rotation(rot), t)
        ssd = _ssd(transform_rigid(a, final), b)
        if ssd < best_ssd:
            best_ssd = ssd
            best_rot, best_t = final.rotation, final.translation

    xf = RigidTransform(_project_rotation(best_rot), best_t)
    if return_details:
        return xf, {"warnings": warnings, "ssd": best_ssd, "trace": trace}
    return xf


def _project_rotation(r: np.ndarray) -> np.ndarray:
    u, _s, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


# ------------------------------------------------------------- case reports

REPORT_COLUMNS = (
    "case",
    "variant",
    "psnr_db",
    "ssim",
    "dice_mouth",
    "dice_larynx",
    "rigid_rot_deg",
    "rigid_trans_mm",
)

_AGG_METRICS = REPORT_COLUMNS[2:]


def evaluate_case(case, result, segmenter=None) -> dict:
    """All metrics of one recovery against its ground truth.

    `result` needs .volume and .phi (None when nothing deformed, in which
    case structure Dice is not applicable). The default segmenter carries
    the pre masks through the recovered deformation and thresholds at 0.5.
    """
    vol = result.volume
    row = {
        "psnr_db": psnr_capped(vol, case.v_gt),
        "ssim": ssim3d(vol, case.v_gt),
        "dice_mouth": None,
        "dice_larynx": None,
    }
    phi = getattr(result, "phi", None)
    if segmenter is not None:
        masks = segmenter(case, result)
    elif phi is not None:
        masks = {
            name: Volume(vol.grid, (warp(mask, phi).data >= 0.5).astype(np.float64))
            for name, mask in case.masks_pre.items()
        }
    else:
        masks = None
    if masks is not None:
        for name, mask in masks.items():
            row[f"dice_{name}"] = dice(mask, case.masks_gt[name])
    xf = rigid_register(vol, case.v_gt)
    ang, trans = rigid_error(xf, identity_transform())
    row["rigid_rot_deg"] = ang
    row["rigid_trans_mm"] = trans
    return row


def aggregate(rows, metrics=_AGG_METRICS) -> dict:
    """Per-metric mean and population standard deviation over defined values."""
    out = {}
    for key in metrics:
        vals = [row[key] for row in rows if row.get(key) is not None]
        if not vals:
            out[key] = {"mean": None, "std": None, "n": 0}
            continue
        arr = np.asarray(vals, dtype=np.float64)
        out[key] = {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}
    return out


def write_report_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("n/a" if row.get(k) is None else row.get(k, "")) for k in REPORT_COLUMNS})


def read_report_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for key, val in raw.items():
                if key in ("case", "variant"):
                    row[key] = val
                elif val in ("n/a", ""):
                    row[key] = None
                else:
                    row[key] = float(val)
            rows.append(row)
    return rows


def write_aggregate_json(path, agg) -> None:
    with open(path, "w") as fh:
        json.dump(agg, fh, indent=1, sort_keys=True)
        fh.write("\n")


def format_mean_std(mean, std, digits: int = 3) -> str:
    """Aggregate cell text: mean with the standard deviation in parentheses."""
    if mean is None:
        return "n/a"
    return f"{mean:.{digits}f} ({std:.{digits}f})"


def format_comparison_table(entries) -> str:
    """Aligned plain-text table; entries = [(label, aggregate dict), ...]."""
    headers = ["method"] + list(_AGG_METRICS)
    rows = []
    for label, agg in entries:
        cells = [label]
        for key in _AGG_METRICS:
            stats = agg.get(key, {"mean": None, "std": None})
            digits = 2 if key == "psnr_db" else 3
            cells.append(format_mean_std(stats["mean"], stats["std"], digits))
        rows.append(cells)
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)))
    return "\n".join(lines) + "\n"


def save_report(out_dir, rows, table_entries=None) -> dict:
    """report.csv + aggregate.json (+ table.txt when entries are given)."""
    os.makedirs(out_dir, exist_ok=True)
    write_report_csv(os.path.join(out_dir, "report.csv"), rows)
    agg = aggregate(rows)
    write_aggregate_json(os.path.join(out_dir, "aggregate.json"), agg)
    if table_entries is not None:
        with open(os.path.join(out_dir, "table.txt"), "w") as fh:
            fh.write(format_comparison_table(table_entries))
    return agg
