"""Multi-scale linear generative volume model v(g) and its regularizers.

The model is a residual PCA pyramid: scale 1 is a PCA of downsampled
training volumes, each finer scale is a PCA of what the coarser scales
failed to explain, and each scale carries a noise channel with a fitted
amplitude. The latent is g = [w, n]: per-scale coefficient vectors w_s and
per-scale noise grids n_s,

    v(g) = clamp_[0,1]( sum_s upsample( mean_s + sum_k w_sk U_sk + a_s n_s ) ).

R(g) = lambda_w L_w + lambda_c L_c + lambda_n L_n keeps w near its fitted
Gaussian statistics, n near N(0, 1), and the centered per-scale w vectors
collinear under a von Mises angle penalty.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import i0e

from .errors import UsageError
from .volume import Grid3, Volume, read_gvol, resample, resample_adjoint, write_gvol

# Degenerate PCA directions (fewer effective modes than d) get this floor so
# sigma stays strictly positive and L_w stays finite.
_SIGMA_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class PriorScale:
    grid: Grid3
    mean: np.ndarray       # (nx, ny, nz) residual mean at this scale
    basis: np.ndarray      # (d, nx, ny, nz), rows orthonormal over voxels
    mu: np.ndarray         # (d,) coefficient means
    sigma: np.ndarray      # (d,) coefficient stds, > 0
    noise_amp: float       # a_s, RMS of the post-PCA residual


@dataclass(frozen=True, eq=False)
class GenerativePrior:
    output_grid: Grid3
    scales: tuple[PriorScale, ...]
    # filled by fit_prior (per-scale explained variance fractions etc.);
    # informational only, not persisted by save_prior
    fit_stats: dict | None = None

    @property
    def d(self) -> int:
        return self.scales[0].basis.shape[0]

    @property
    def n_scales(self) -> int:
        return len(self.scales)


@dataclass(eq=False)
class LatentParams:
    """g = [w, n]: w shape (S, d); n is one grid per scale."""

    w: np.ndarray
    n: list[np.ndarray]

    def copy(self) -> "LatentParams":
        return LatentParams(self.w.copy(), [a.copy() for a in self.n])

    def arrays(self) -> list[np.ndarray]:
        """Optimizer view: the mutable arrays making up g."""
        return [self.w, *self.n]


def scale_grid(output_grid: Grid3, dims) -> Grid3:
    """Cell-aligned coarse grid spanning the same world extent as output_grid."""
    dims = tuple(int(d) for d in dims)
    spacing = tuple(
        so * no / nd for so, no, nd in zip(output_grid.spacing, output_grid.dims, dims)
    )
    origin = tuple(
        oo - so / 2.0 + ss / 2.0 for oo, so, ss in zip(output_grid.origin, output_grid.spacing, spacing)
    )
    return Grid3(dims, spacing, origin)


def validate_latent(prior: GenerativePrior, g: LatentParams) -> None:
    if g.w.shape != (prior.n_scales, prior.d):
        raise UsageError(
            f"latent w shape {g.w.shape} does not match prior ({prior.n_scales}, {prior.d})"
        )
    if len(g.n) != prior.n_scales:
        raise UsageError(f"latent has {len(g.n)} noise grids, prior has {prior.n_scales} scales")
    for s, (noise, scale) in enumerate(zip(g.n, prior.scales)):
        if noise.shape != scale.grid.dims:
            raise UsageError(
                f"noise grid {s} shape {noise.shape} does not match scale dims {scale.grid.dims}"
            )


def zero_latent(prior: GenerativePrior) -> LatentParams:
    return LatentParams(
        np.zeros((prior.n_scales, prior.d)),
        [np.zeros(s.grid.dims) for s in prior.scales],
    )


def fit_prior(training_volumes, d: int = 8, scales=((16, 16, 16), (32, 32, 32), (64, 64, 64)), seed: int = 0) -> GenerativePrior:
    """Fit the residual multi-scale PCA prior.

    Coarse scale: PCA (top d) of downsampled volumes. Each finer scale: PCA
    of the residual between the downsampled volume and the upsampled
    reconstruction from all coarser scales. mu/sigma are the per-component
    coefficient statistics, a_s the RMS of the post-PCA residual. All fitted
    fields are quantized to float32-representable values so the persisted
    prior reloads bit-exactly. `seed` is accepted for interface stability;
    the fit is deterministic and does not consume randomness.
    """
    del seed
    vols = list(training_volumes)
    if d < 1:
        raise UsageError(f"d must be >= 1, got {d}")
    if len(vols) < d + 1:
        raise UsageError(f"fit_prior needs at least d+1 = {d + 1} volumes, got {len(vols)}")
    out_grid = vols[0].grid
    for v in vols[1:]:
        if v.grid != out_grid:
            raise UsageError("fit_prior: training volumes must share one grid")

    fitted: list[PriorScale] = []
    coeffs: list[np.ndarray] = []
    explained: list[float] = []
    for sdims in scales:
        gs = scale_grid(out_grid, sdims)
        targets = np.stack([resample(v, gs).data.ravel() for v in vols])
        if fitted:
            approx = np.stack(
                [resample(_partial_synth(fitted, coeffs, i, out_grid), gs).data.ravel() for i in range(len(vols))]
            )
            targets = targets - approx
        mean = targets.mean(axis=0)
        centered = targets - mean
        _, svals, vt = np.linalg.svd(centered, full_matrices=False)
        basis = vt[:d]
        if basis.shape[0] < d:
            basis = np.vstack([basis, np.zeros((d - basis.shape[0], basis.shape[1]))])
        c = centered @ basis.T
        mu = c.mean(axis=0)
        sigma = np.maximum(c.std(axis=0), _SIGMA_FLOOR)
        resid = centered - c @ basis
        amp = float(np.sqrt(np.mean(resid**2)))
        total_var = float(np.sum(svals**2))
        explained.append(float(np.sum(svals[:d] ** 2) / total_var) if total_var > 0 else 1.0)
        mean32 = mean.astype(np.float32).astype(np.float64).reshape(gs.dims)
        basis32 = basis.astype(np.float32).astype(np.float64).reshape((d,) + gs.dims)
        fitted.append(PriorScale(gs, np.ascontiguousarray(mean32), np.ascontiguousarray(basis32), mu, sigma, amp))
        coeffs.append(c)
    stats = {
        "explained_variance": explained,
        "noise_amp": [s.noise_amp for s in fitted],
        "n_train": len(vols),
    }
    return GenerativePrior(out_grid, tuple(fitted), stats)


def _partial_synth(fitted, coeffs, i: int, out_grid: Grid3) -> Volume:
    """Reconstruction of training volume i from the already-fitted scales."""
    total = np.zeros(out_grid.dims)
    for scale, c in zip(fitted, coeffs):
        field = scale.mean + np.tensordot(c[i], scale.basis, axes=1)
        total += resample(Volume(scale.grid, field), out_grid).data
    return Volume(out_grid, total)


def _scale_field(scale: PriorScale, w_s: np.ndarray, n_s: np.ndarray) -> np.ndarray:
    return scale.mean + np.tensordot(w_s, scale.basis, axes=1) + scale.noise_amp * n_s


def synthesize_pre(prior: GenerativePrior, g: LatentParams) -> np.ndarray:
    """Pre-clamp synthesis sum on the output grid."""
    validate_latent(prior, g)
    total = np.zeros(prior.output_grid.dims)
    for s, scale in enumerate(prior.scales):
        field = _scale_field(scale, g.w[s], g.n[s])
        total += resample(Volume(scale.grid, field), prior.output_grid).data
    return total


def synthesize(prior: GenerativePrior, g: LatentParams) -> Volume:
    """v(g): clamp the multi-scale sum to the normalized range [0, 1]."""
    return Volume(prior.output_grid, np.clip(synthesize_pre(prior, g), 0.0, 1.0))


def synthesize_vjp(prior: GenerativePrior, g: LatentParams, upstream, pre: np.ndarray | None = None) -> LatentParams:
    """Transpose of the synthesis chain applied to a volume-shaped upstream.

    The clamp passes gradient only where the pre-clamp value is strictly
    inside (0, 1). Pass `pre` (from synthesize_pre) to skip recomputation.
    """
    up = upstream.data if isinstance(upstream, Volume) else np.asarray(upstream, dtype=np.float64)
    if up.shape != prior.output_grid.dims:
        raise UsageError(f"upstream shape {up.shape} does not match output grid {prior.output_grid.dims}")
    if pre is None:
        pre = synthesize_pre(prior, g)
    masked = np.where((pre > 0.0) & (pre < 1.0), up, 0.0)
    grad_w = np.zeros_like(g.w)
    grad_n = []
    for s, scale in enumerate(prior.scales):
        back = resample_adjoint(masked, scale.grid, prior.output_grid)
        grad_w[s] = np.tensordot(scale.basis, back, axes=3)
        grad_n.append(scale.noise_amp * back)
    return LatentParams(grad_w, grad_n)


def map_latent(prior: GenerativePrior, z: np.ndarray) -> np.ndarray:
    """The mapping m: w_s = mu_s + sigma_s * z_s, componentwise affine."""
    z = np.asarray(z, dtype=np.float64)
    mu = np.stack([s.mu for s in prior.scales])
    sigma = np.stack([s.sigma for s in prior.scales])
    return mu + sigma * z


def sample_latent(prior: GenerativePrior, seed: int) -> LatentParams:
    """Draw g: z_s ~ N(0, I_d) mapped through m, then unit-normal noise grids.

    Draw order is fixed (all z per scale in order, then all noise grids in
    order) so a seed pins g exactly.
    """
    rng = np.random.default_rng(seed)
    z = np.stack([rng.standard_normal(prior.d) for _ in prior.scales])
    w = map_latent(prior, z)
    n = [rng.standard_normal(s.grid.dims) for s in prior.scales]
    return LatentParams(w, n)


def log_i0(kappa: float) -> float:
    """log I0(kappa), stable for large kappa via the scaled Bessel function."""
    return float(np.log(i0e(kappa)) + kappa)


def vonmises_neglog(theta: float, kappa: float) -> float:
    """-log M(theta | 0, kappa) = -kappa*cos(theta) + log(2*pi*I0(kappa))."""
    if not kappa > 0:
        raise UsageError(f"kappa must be > 0, got {kappa}")
    return -kappa * np.cos(theta) + np.log(2.0 * np.pi) + log_i0(kappa)


def reg_loss(prior: GenerativePrior, g: LatentParams, weights=(0.05, 0.05, 0.01), kappa: float = 10.0):
    """R(g) = lambda_w L_w + lambda_c L_c + lambda_n L_n and its gradient.

    L_w, L_n are Gaussian negative log-likelihoods. L_c sums the von Mises
    negative log-density of the angle between every centered pair
    (w_i - mu_i, w_j - mu_j), i < j. Because
    -log M(arccos(rho) | 0, kappa) = -kappa*rho + const, the pair term is
    evaluated directly on the normalized dot product rho, which also makes
    the gradient smooth at collinearity. A zero-norm centered vector
    contributes nothing for its pairs (degenerate case).
    """
    validate_latent(prior, g)
    lam_w, lam_c, lam_n = (float(x) for x in weights)
    if lam_w < 0 or lam_c < 0 or lam_n < 0:
        raise UsageError("regularizer weights must be >= 0")
    if not kappa > 0:
        raise UsageError(f"kappa must be > 0, got {kappa}")
    mu = np.stack([s.mu for s in prior.scales])
    sigma = np.stack([s.sigma for s in prior.scales])

    dev = (g.w - mu) / sigma
    l_w = float(np.sum(0.5 * dev**2 + np.log(sigma) + 0.5 * np.log(2.0 * np.pi)))
    grad_w = lam_w * dev / sigma

    l_n = 0.0
    grad_n = []
    for noise in g.n:
        l_n += float(0.5 * np.sum(noise**2) + 0.5 * noise.size * np.log(2.0 * np.pi))
        grad_n.append(lam_n * noise)

    log_norm = np.log(2.0 * np.pi) + log_i0(kappa)
    centered = g.w - mu
    norms = np.linalg.norm(centered, axis=1)
    s_count = prior.n_scales
    l_c = 0.0
    grad_c = np.zeros_like(g.w)
    for i in range(s_count):
        for j in range(i + 1, s_count):
            if norms[i] == 0.0 or norms[j] == 0.0:
                continue
            wi, wj = centered[i], centered[j]
            ni, nj = norms[i], norms[j]
            rho = float(wi @ wj) / (ni * nj)
            l_c += -kappa * rho + log_norm
            grad_c[i] += -kappa * (wj / (ni * nj) - rho * wi / ni**2)
            grad_c[j] += -kappa * (wi / (ni * nj) - rho * wj / nj**2)

    total = lam_w * l_w + lam_c * l_c + lam_n * l_n
    grad = LatentParams(grad_w + lam_c * grad_c, grad_n)
    return total, grad


def save_prior(dir_path, prior: GenerativePrior) -> None:
    """Persist as manifest.json plus one GVOL per mean/basis volume."""
    os.makedirs(dir_path, exist_ok=True)
    manifest = {
        "format": "birec-prior",
        "version": 1,
        "d": prior.d,
        "output_grid": _grid_doc(prior.output_grid),
        "scales": [],
    }
    for s, scale in enumerate(prior.scales):
        mean_file = f"mean_s{s}.gvol"
        basis_files = [f"basis_s{s}_k{k}.gvol" for k in range(prior.d)]
        write_gvol(os.path.join(dir_path, mean_file), Volume(scale.grid, scale.mean))
        for k, name in enumerate(basis_files):
            write_gvol(os.path.join(dir_path, name), Volume(scale.grid, scale.basis[k]))
        manifest["scales"].append(
            {
                "grid": _grid_doc(scale.grid),
                "mean_file": mean_file,
                "basis_files": basis_files,
                "mu": scale.mu.tolist(),
                "sigma": scale.sigma.tolist(),
                "noise_amp": scale.noise_amp,
            }
        )
    with open(os.path.join(dir_path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def load_prior(dir_path) -> GenerativePrior:
    with open(os.path.join(dir_path, "manifest.json")) as fh:
        manifest = json.load(fh)
    scales = []
    for doc in manifest["scales"]:
        grid = _grid_from_doc(doc["grid"])
        mean = read_gvol(os.path.join(dir_path, doc["mean_file"])).data
        basis = np.stack(
            [read_gvol(os.path.join(dir_path, name)).data for name in doc["basis_files"]]
        )
        scales.append(
            PriorScale(
                grid,
                mean,
                basis,
                np.array(doc["mu"], dtype=np.float64),
                np.array(doc["sigma"], dtype=np.float64),
                float(doc["noise_amp"]),
            )
        )
    return GenerativePrior(_grid_from_doc(manifest["output_grid"]), tuple(scales))


def _grid_doc(grid: Grid3) -> dict:
    return {"dims": list(grid.dims), "spacing": list(grid.spacing), "origin": list(grid.origin)}


def _grid_from_doc(doc: dict) -> Grid3:
    return Grid3(tuple(doc["dims"]), tuple(doc["spacing"]), tuple(doc["origin"]))
