"""Shared oracles and finite-difference utilities for the test suite."""

import numpy as np

from birec.volume import Grid3, Volume


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def directional_fd(f, x, d, eps=1e-5):
    """Central difference of scalar f along direction d at x (flat arrays)."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    return (f(x + eps * d) - f(x - eps * d)) / (2.0 * eps)


def check_directional(f_val_grad, x0, rng, n_dirs=4, eps=1e-5, tol=1e-3):
    """Compare <grad, d> against central differences along random directions.

    f_val_grad(x) -> (value, grad) with x and grad flat arrays of equal size.
    Returns the worst relative error over n_dirs random unit directions.
    """
    x0 = np.asarray(x0, dtype=float)
    _, grad = f_val_grad(x0)
    grad = np.asarray(grad, dtype=float).ravel()
    worst = 0.0
    for _ in range(n_dirs):
        d = rng.standard_normal(x0.size)
        d /= np.linalg.norm(d)
        fd = directional_fd(lambda x: f_val_grad(x)[0], x0, d, eps)
        an = float(grad @ d)
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-9)
        worst = max(worst, err)
    assert worst <= tol, f"directional derivative mismatch: rel err {worst:.2e} > {tol:.0e}"
    return worst


def small_grid(n=8, spacing=2.0):
    sp = (spacing,) * 3
    org = tuple(-(n - 1) / 2.0 * spacing for _ in range(3))
    return Grid3((n, n, n), sp, org)


def smooth_volume(grid, seed=0, lo=0.1, hi=0.9):
    """Band-limited random volume in [lo, hi]: white noise on a coarse grid,
    trilinearly upsampled, so finite differences stay well behaved."""
    from birec.volume import resample

    rng = np.random.default_rng(seed)
    cd = tuple(max(2, d // 2) for d in grid.dims)
    sp = tuple(g * (d / c) for g, d, c in zip(grid.spacing, grid.dims, cd))
    corg = tuple(o + (s - g) / 2.0 for o, s, g in zip(grid.origin, sp, grid.spacing))
    coarse = Volume(Grid3(cd, sp, corg), rng.uniform(lo, hi, cd))
    out = resample(coarse, grid)
    data = np.clip(out.data, 0.0, 1.0)
    # resample zero-fills outside the coarse grid; pull those voxels to mid-range
    data[data == 0.0] = (lo + hi) / 2.0
    return Volume(grid, data)


def smooth_velocity(grid, seed=0, max_norm_mm=3.0, sigma_vox=None):
    """Random smooth velocity field with max vector norm max_norm_mm.

    Gaussian-filtered white noise per component: C-infinity up to the
    discretization, so integration and inversion errors stay second order.
    Control-grid upsampling is deliberately avoided here; its derivative
    kinks put first-order interpolation error right where the inverse
    consistency property is measured.
    """
    from scipy.ndimage import gaussian_filter

    from birec.deform import VelocityField

    rng = np.random.default_rng(seed)
    if sigma_vox is None:
        sigma_vox = max(2.0, 0.18 * min(grid.dims))
    data = np.stack(
        [gaussian_filter(rng.standard_normal(grid.dims), sigma_vox, mode="constant") for _ in range(3)],
        axis=-1,
    )
    peak = float(np.linalg.norm(data, axis=-1).max())
    if peak > 0:
        data = data * (max_norm_mm / peak)
    return VelocityField(grid, data)
