"""Guided recovery engine: projection loss, warm-up, joint optimization, ablations.

The full method minimizes, over latent g and control-grid velocity u,

    J(g, u) = sum_i L_i(W(v-, Phi(u)), I_i)
              + lambda_s * ||v(g) - W(v-, Phi(u))||^2
              + lambda_d * ||grad u||^2  +  R(g)

and returns the warped pre-acquired volume W(v-, Phi(u*)). The coupling
term keeps the warp close to an anatomically plausible generated volume;
the projection term L_i = lambda2*||A_i w - I_i||_2 + lambda_p*L_p ties it
to the measured views. Every gradient is assembled from module VJPs, so
single-threaded runs with a fixed seed are bit-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .deform import (
    DeformationField,
    RegisterConfig,
    VelocityField,
    _integrate_cache,
    control_grid,
    integrate_velocity,
    integrate_velocity_vjp,
    load_field,
    save_field,
    smoothness_loss,
    upsample_velocity,
    warp,
    warp_vjp,
    register,
)
from .errors import NumericalError, UsageError
from .generative import (
    GenerativePrior,
    LatentParams,
    reg_loss,
    sample_latent,
    scale_grid,
    synthesize_pre,
    synthesize_vjp,
)
from .projector import Projection, project, project_adjoint
from .volume import Volume, read_gvol, write_gvol

VARIANTS = ("no-prior", "gen-only", "gen-then-deform", "deform-only", "full")
TRACE_COLUMNS = ("iteration", "phase", "total", "proj_l2", "proj_perc", "coupling", "smoothness", "reg")


@dataclass(frozen=True)
class ReconConfig:
    lambda2: float = 1.0
    lambda_p: float = 0.1
    lambda_w: float = 0.05
    lambda_c: float = 0.05
    lambda_n: float = 0.01
    kappa: float = 10.0
    lambda_s: float = 1.0
    lambda_d: float = 0.1
    warmup_iters: int = 10
    main_iters: int = 300
    lr_g: float = 0.05
    lr_u: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    variant: str = "full"
    steps: int = 6            # scaling-and-squaring doublings
    control_divisor: int = 4  # velocity control grid = volume dims / divisor
    freeze_u: bool = False    # keep u at zero (diagnostics)

    def __post_init__(self):
        for name in ("lambda2", "lambda_p", "lambda_w", "lambda_c", "lambda_n", "lambda_s", "lambda_d"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.warmup_iters < 0 or self.main_iters < 0:
            raise UsageError("iteration counts must be >= 0")
        if not (self.lr_g > 0 and self.lr_u > 0):
            raise UsageError("learning rates must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise UsageError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise UsageError("eps must be > 0")
        if not self.kappa > 0:
            raise UsageError(f"kappa must be > 0, got {self.kappa}")
        if self.steps < 1 or self.control_divisor < 1:
            raise UsageError("steps and control_divisor must be >= 1")
        if self.variant not in VARIANTS + ("backprojection",):
            raise UsageError(f"unknown variant '{self.variant}'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ReconConfig":
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(doc) - known)
        if bad:
            raise UsageError(f"unknown config keys: {', '.join(bad)}")
        return cls(**doc)


def config_hash(cfg: ReconConfig) -> str:
    """Hash of every parameter affecting results."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- optimizer

@dataclass(eq=False)
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, beta1, beta2, eps)


def adam_step(state: AdamState, params, grads, lr: float):
    """One bias-corrected Adam update; returns (state, new params)."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise UsageError("adam_step: state/params/grads block counts differ")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {i}")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        out.append(p - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return state, out


# ------------------------------------------------------- perceptual features

class PerceptualNet:
    """Fixed random two-layer conv feature extractor.

    Filters are standard-normal draws from numpy's default generator with
    the given seed (layer 1 fully drawn before layer 2), scaled by
    1/sqrt(fan-in) so feature magnitudes track the input. Both layers are
    valid 5x5 convolutions with stride 2 and leaky rectification
    y = max(x, 0.1x). Deterministic across runs given the seed.
    """

    def __init__(self, seed: int = 42):
        rng = np.random.default_rng(seed)
        self.w1 = rng.standard_normal((8, 1, 5, 5)) / np.sqrt(25.0)
        self.w2 = rng.standard_normal((16, 8, 5, 5)) / np.sqrt(8 * 25.0)

    def _forward(self, image: np.ndarray):
        x = image[:, :, None]
        z1 = _conv_down(x, self.w1)
        h1 = _leaky(z1)
        z2 = _conv_down(h1, self.w2)
        h2 = _leaky(z2)
        return SimpleNamespace(x_shape=x.shape, z1=z1, h1=h1, z2=z2, h2=h2)

    def features(self, image: np.ndarray) -> list:
        f = self._forward(_check_image(image))
        return [f.h1, f.h2]

    def loss(self, p: np.ndarray, q: np.ndarray):
        p = _check_image(p)
        q = _check_image(q)
        if p.shape != q.shape:
            raise UsageError(f"image dims differ: {p.shape} vs {q.shape}")
        fp = self._forward(p)
        fq = self._forward(q)
        d1 = fp.h1 - fq.h1
        d2 = fp.h2 - fq.h2
        loss = float(np.mean(d1 * d1) + np.mean(d2 * d2))
        g_h2 = (2.0 / d2.size) * d2
        g_h1 = _conv_down_back(g_h2 * _dleaky(fp.z2), self.w2, fp.h1.shape)
        g_h1 += (2.0 / d1.size) * d1
        g_x = _conv_down_back(g_h1 * _dleaky(fp.z1), self.w1, fp.x_shape)
        return loss, g_x[:, :, 0]


def _leaky(x):
    return np.where(x > 0.0, x, 0.1 * x)


def _dleaky(x):
    return np.where(x > 0.0, 1.0, 0.1)


def _check_image(image) -> np.ndarray:
    data = image.data if isinstance(image, Projection) else np.asarray(image, dtype=np.float64)
    if data.ndim != 2:
        raise UsageError(f"perceptual input must be 2D, got shape {data.shape}")
    if min(data.shape) < 16:
        raise UsageError(f"image {data.shape} is smaller than the 16x16 receptive field")
    return data


def _conv_down(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid 5x5 stride-2 convolution, x (H,W,Cin), w (Cout,Cin,5,5)."""
    win = sliding_window_view(x, (5, 5), axis=(0, 1))[::2, ::2]
    oh, ow = win.shape[:2]
    cols = win.reshape(oh, ow, -1)
    wmat = w.transpose(1, 2, 3, 0).reshape(-1, w.shape[0])
    return cols @ wmat


def _conv_down_back(gout: np.ndarray, w: np.ndarray, x_shape) -> np.ndarray:
    oh, ow = gout.shape[:2]
    wmat = w.transpose(1, 2, 3, 0).reshape(-1, w.shape[0])
    gcols = (gout @ wmat.T).reshape(oh, ow, w.shape[1], 5, 5)
    gx = np.zeros(x_shape)
    for a in range(5):
        for b in range(5):
            gx[a : a + 2 * oh - 1 : 2, b : b + 2 * ow - 1 : 2] += gcols[:, :, :, a, b]
    return gx


@lru_cache(maxsize=1)
def _default_net() -> PerceptualNet:
    return PerceptualNet(seed=42)


def perceptual_features(image) -> list:
    """Feature stack [layer1, layer2] of the fixed seed-42 net."""
    return _default_net().features(_check_image(image))


def perceptual_loss(p, q):
    """Mean squared feature difference summed over layers; gradient wrt p."""
    return _default_net().loss(p, q)


# ---------------------------------------------------------- projection loss

def _check_pairs(projections, geoms):
    if len(projections) == 0 or len(projections) != len(geoms):
        raise UsageError(f"got {len(projections)} projections for {len(geoms)} geometries")
    for i, (p, gm) in enumerate(zip(projections, geoms)):
        data = p.data if isinstance(p, Projection) else np.asarray(p)
        if data.shape != (gm.nu, gm.nv):
            raise UsageError(
                f"projection {i} shape {data.shape} does not match detector ({gm.nu}, {gm.nv})"
            )


def _projection_terms(v: Volume, projections, geoms, lambda2: float, lambda_p: float):
    """Weighted l2/perceptual totals and the volume-space gradient."""
    l2_total = 0.0
    perc_total = 0.0
    grad = np.zeros(v.grid.dims)
    for meas, gm in zip(projections, geoms):
        target = meas.data if isinstance(meas, Projection) else np.asarray(meas, dtype=np.float64)
        pred = project(v, gm)
        r = pred.data - target
        nrm = float(np.sqrt(np.sum(r * r)))
        l2_total += lambda2 * nrm
        gimg = np.zeros_like(r)
        if lambda2 > 0 and nrm > 0:
            gimg += lambda2 * r / nrm
        if lambda_p > 0:
            pl, gp = perceptual_loss(pred.data, target)
            perc_total += lambda_p * pl
            gimg += lambda_p * gp
        if np.any(gimg):
            grad += project_adjoint(Projection(gimg, gm.du, gm.dv), gm, v.grid).data
    return l2_total, perc_total, grad


def projection_loss(v: Volume, projections, geoms, lambda2: float = 1.0, lambda_p: float = 0.1):
    """Sum over views of lambda2*||A_i v - I_i||_2 + lambda_p*L_p, plus gradient.

    The l2 term is the plain (non-squared) Euclidean norm; its gradient at
    zero residual is defined as 0.
    """
    _check_pairs(projections, geoms)
    l2, perc, grad = _projection_terms(v, projections, geoms, lambda2, lambda_p)
    return l2 + perc, Volume(v.grid, grad)


# ----------------------------------------------------------------- results

@dataclass(eq=False)
class ReconResult:
    """Recovered volume plus the state and trace that produced it.

    volume is W(v-, Phi(u*)) for deforming variants and v(g*) for the
    generative-only variant. phi is the realized displacement on the volume
    grid (a raw field for the no-prior variant, None when nothing deforms).
    trace rows are dicts keyed by TRACE_COLUMNS, one per iteration.
    """

    volume: Volume
    g: LatentParams | None
    u: VelocityField | None
    phi: DeformationField | None
    trace: list
    warnings: list = field(default_factory=list)
    register_trace: list | None = None


def _check_terms(terms: dict, phase: str, it: int) -> float:
    for name, val in terms.items():
        if not np.isfinite(val):
            raise NumericalError(
                f"objective term '{name}' is non-finite at {phase} iteration {it}"
            )
    return float(sum(terms.values()))


def _trace_row(it: int, phase: str, terms: dict, total: float) -> dict:
    return {"iteration": it, "phase": phase, "total": total, **terms}


_LATE_FRACTION = 0.9  # best iterate this late in the budget -> warn


# ------------------------------------------------------------------ warm-up

def _g_objective(prior, g, projections, geoms, cfg, with_grad: bool = True):
    """Projection loss of v(g) plus R(g); the warm-up / gen-only objective."""
    pre = synthesize_pre(prior, g)
    v_g = Volume(prior.output_grid, np.clip(pre, 0.0, 1.0))
    l2, perc, grad_vol = _projection_terms(v_g, projections, geoms, cfg.lambda2, cfg.lambda_p)
    reg, g_reg = reg_loss(prior, g, (cfg.lambda_w, cfg.lambda_c, cfg.lambda_n), cfg.kappa)
    terms = {"proj_l2": l2, "proj_perc": perc, "coupling": 0.0, "smoothness": 0.0, "reg": reg}
    if not with_grad:
        return terms, None
    g_syn = synthesize_vjp(prior, g, grad_vol, pre=pre)
    blocks = [g_syn.w + g_reg.w] + [a + b for a, b in zip(g_syn.n, g_reg.n)]
    return terms, blocks


def warmup(prior: GenerativePrior, projections, geoms, cfg: ReconConfig):
    """Initial fit of g alone: warmup_iters Adam steps from sample_latent.

    Returns (g, trace). The returned g is the best iterate seen (including
    the post-final-step candidate), so its objective never exceeds the
    initialization's.
    """
    _check_pairs(projections, geoms)
    g = sample_latent(prior, cfg.seed)
    if cfg.warmup_iters == 0:
        return g, []
    trace = []
    best_total = np.inf
    best_g = g.copy()
    state = adam_init(g.arrays(), cfg.beta1, cfg.beta2, cfg.eps)
    for it in range(cfg.warmup_iters):
        terms, blocks = _g_objective(prior, g, projections, geoms, cfg)
        total = _check_terms(terms, "warmup", it)
        trace.append(_trace_row(it, "warmup", terms, total))
        if total < best_total:
            best_total, best_g = total, g.copy()
        state, arrs = adam_step(state, g.arrays(), blocks, cfg.lr_g)
        g = LatentParams(arrs[0], list(arrs[1:]))
    terms, _ = _g_objective(prior, g, projections, geoms, cfg, with_grad=False)
    total = _check_terms(terms, "warmup", cfg.warmup_iters)
    if total < best_total:
        best_g = g.copy()
    return best_g, trace


# ------------------------------------------------------------- full method

def _joint_objective(prior, v_minus, g, u_data, cgrid, projections, geoms, cfg):
    """Terms and gradients of J(g, u) at the current iterate."""
    grid = v_minus.grid
    pre = synthesize_pre(prior, g)
    v_g = np.clip(pre, 0.0, 1.0)
    u_field = VelocityField(cgrid, u_data)
    u_full = upsample_velocity(u_field, grid)
    phi_flat, chain = _integrate_cache(u_full, cfg.steps)
    phi = DeformationField(grid, phi_flat.reshape(grid.dims + (3,)))
    warped = warp(v_minus, phi)
    l2, perc, grad_warped = _projection_terms(warped, projections, geoms, cfg.lambda2, cfg.lambda_p)
    diff = v_g - warped.data
    coupling = cfg.lambda_s * float(np.sum(diff * diff))
    smooth, g_smooth = smoothness_loss(u_field, cfg.lambda_d)
    reg, g_reg = reg_loss(prior, g, (cfg.lambda_w, cfg.lambda_c, cfg.lambda_n), cfg.kappa)
    terms = {"proj_l2": l2, "proj_perc": perc, "coupling": coupling, "smoothness": smooth, "reg": reg}

    g_syn = synthesize_vjp(prior, g, 2.0 * cfg.lambda_s * diff, pre=pre)
    g_blocks = [g_syn.w + g_reg.w] + [a + b for a, b in zip(g_syn.n, g_reg.n)]
    if cfg.freeze_u:
        u_grad = np.zeros_like(u_data)
    else:
        _, grad_phi = warp_vjp(v_minus, phi, grad_warped - 2.0 * cfg.lambda_s * diff)
        g_ufull = integrate_velocity_vjp(u_full, cfg.steps, grad_phi, chain)
        u_grad = np.stack(
            [_resample_adjoint_comp(g_ufull, c, cgrid, grid) for c in range(3)], axis=-1
        )
        u_grad += g_smooth
    return terms, g_blocks, u_grad


def _resample_adjoint_comp(g_full, c, cgrid, grid):
    from .volume import resample_adjoint

    return resample_adjoint(np.ascontiguousarray(g_full[..., c]), cgrid, grid)


def reconstruct(prior: GenerativePrior, v_minus: Volume, projections, geoms, cfg: ReconConfig) -> ReconResult:
    """Warm-up on g, then joint Adam over (g, u) on J; returns W(v-, Phi(u*)).

    The reported iterate is the best-total-objective one (evaluated at
    iteration starts plus once after the final step). main_iters = 0 leaves
    u at zero, so the recovered volume equals v_minus exactly.
    """
    _check_pairs(projections, geoms)
    if v_minus.grid != prior.output_grid:
        raise UsageError("v_minus must live on the prior's output grid")
    g, trace = warmup(prior, projections, geoms, cfg)
    trace = list(trace)
    grid = v_minus.grid
    cgrid = control_grid(grid, cfg.control_divisor)
    u = np.zeros(cgrid.dims + (3,))
    warnings = []
    best_total = np.inf
    best_g, best_u = g.copy(), u.copy()
    best_it = -1
    state_g = adam_init(g.arrays(), cfg.beta1, cfg.beta2, cfg.eps)
    state_u = adam_init([u], cfg.beta1, cfg.beta2, cfg.eps)
    for it in range(cfg.main_iters):
        terms, g_blocks, u_grad = _joint_objective(prior, v_minus, g, u, cgrid, projections, geoms, cfg)
        total = _check_terms(terms, "main", it)
        trace.append(_trace_row(it, "main", terms, total))
        if total < best_total:
            best_total, best_g, best_u, best_it = total, g.copy(), u.copy(), it
        state_g, arrs = adam_step(state_g, g.arrays(), g_blocks, cfg.lr_g)
        g = LatentParams(arrs[0], list(arrs[1:]))
        if not cfg.freeze_u:
            state_u, (u,) = adam_step(state_u, [u], [u_grad], cfg.lr_u)
    if cfg.main_iters > 0:
        terms, _, _ = _joint_objective(prior, v_minus, g, u, cgrid, projections, geoms, cfg)
        total = _check_terms(terms, "main", cfg.main_iters)
        if total < best_total:
            best_g, best_u, best_it = g.copy(), u.copy(), cfg.main_iters
        if best_it >= int(_LATE_FRACTION * cfg.main_iters):
            warnings.append("main phase was still improving when the iteration budget ran out")
    u_field = VelocityField(cgrid, best_u)
    phi = integrate_velocity(upsample_velocity(u_field, grid), cfg.steps)
    return ReconResult(warp(v_minus, phi), best_g, u_field, phi, trace, warnings)


# -------------------------------------------------------------- ablations

def run_variant(mode: str, prior, v_minus: Volume, projections, geoms, cfg: ReconConfig) -> ReconResult:
    """One ablation arm; see VARIANTS for the mode names."""
    if mode not in VARIANTS:
        raise UsageError(f"unknown variant '{mode}' (expected one of: {', '.join(VARIANTS)})")
    _check_pairs(projections, geoms)
    if mode == "full":
        return reconstruct(prior, v_minus, projections, geoms, cfg)
    if mode == "no-prior":
        return _run_no_prior(v_minus, projections, geoms, cfg)
    if mode == "deform-only":
        return _run_deform_only(v_minus, projections, geoms, cfg)
    if prior is None:
        raise UsageError(f"variant '{mode}' requires a generative prior")
    if v_minus.grid != prior.output_grid:
        raise UsageError("v_minus must live on the prior's output grid")
    if mode == "gen-only":
        return _run_gen_only(prior, projections, geoms, cfg)
    return _run_gen_then_deform(prior, v_minus, projections, geoms, cfg)


def _run_gen_only(prior, projections, geoms, cfg) -> ReconResult:
    """Fit g against the projections alone and return v(g*)."""
    g, trace = warmup(prior, projections, geoms, cfg)
    trace = list(trace)
    best_total = np.inf
    best_g = g.copy()
    best_it = -1
    warnings = []
    state = adam_init(g.arrays(), cfg.beta1, cfg.beta2, cfg.eps)
    for it in range(cfg.main_iters):
        terms, blocks = _g_objective(prior, g, projections, geoms, cfg)
        total = _check_terms(terms, "main", it)
        trace.append(_trace_row(it, "main", terms, total))
        if total < best_total:
            best_total, best_g, best_it = total, g.copy(), it
        state, arrs = adam_step(state, g.arrays(), blocks, cfg.lr_g)
        g = LatentParams(arrs[0], list(arrs[1:]))
    if cfg.main_iters > 0:
        terms, _ = _g_objective(prior, g, projections, geoms, cfg, with_grad=False)
        total = _check_terms(terms, "main", cfg.main_iters)
        if total < best_total:
            best_g, best_it = g.copy(), cfg.main_iters
        if best_it >= int(_LATE_FRACTION * cfg.main_iters):
            warnings.append("main phase was still improving when the iteration budget ran out")
    pre = synthesize_pre(prior, best_g)
    vol = Volume(prior.output_grid, np.clip(pre, 0.0, 1.0))
    return ReconResult(vol, best_g, None, None, trace, warnings)


def _run_gen_then_deform(prior, v_minus, projections, geoms, cfg) -> ReconResult:
    """Gen-only solve, then a single registration of v- onto v(g*)."""
    base = _run_gen_only(prior, projections, geoms, cfg)
    rcfg = RegisterConfig(lambda_s=cfg.lambda_s, lambda_d=cfg.lambda_d, steps=cfg.steps)
    rr = register(v_minus, base.volume, rcfg)
    phi = integrate_velocity(upsample_velocity(rr.u, v_minus.grid), cfg.steps)
    warnings = list(base.warnings)
    if rr.budget_exhausted:
        warnings.append("registration was still improving when its budget ran out")
    return ReconResult(
        warp(v_minus, phi), base.g, rr.u, phi, base.trace, warnings, register_trace=rr.objective_trace
    )


def _run_no_prior(v_minus, projections, geoms, cfg) -> ReconResult:
    """Raw displacement descent: no integration, no smoothness, no R(g)."""
    grid = v_minus.grid
    phi_data = np.zeros(grid.dims + (3,))
    trace = []
    best_total = np.inf
    best_phi = phi_data.copy()
    warnings = []
    state = adam_init([phi_data], cfg.beta1, cfg.beta2, cfg.eps)

    def eval_terms(pd):
        phi = DeformationField(grid, pd)
        warped = warp(v_minus, phi)
        l2, perc, grad_warped = _projection_terms(warped, projections, geoms, cfg.lambda2, cfg.lambda_p)
        terms = {"proj_l2": l2, "proj_perc": perc, "coupling": 0.0, "smoothness": 0.0, "reg": 0.0}
        _, grad_phi = warp_vjp(v_minus, phi, grad_warped)
        return terms, grad_phi

    best_it = -1
    for it in range(cfg.main_iters):
        terms, grad_phi = eval_terms(phi_data)
        total = _check_terms(terms, "main", it)
        trace.append(_trace_row(it, "main", terms, total))
        if total < best_total:
            best_total, best_phi, best_it = total, phi_data.copy(), it
        state, (phi_data,) = adam_step(state, [phi_data], [grad_phi], cfg.lr_u)
    if cfg.main_iters > 0:
        terms, _ = eval_terms(phi_data)
        total = _check_terms(terms, "main", cfg.main_iters)
        if total < best_total:
            best_phi, best_it = phi_data.copy(), cfg.main_iters
        if best_it >= int(_LATE_FRACTION * cfg.main_iters):
            warnings.append("main phase was still improving when the iteration budget ran out")
    phi = DeformationField(grid, best_phi)
    return ReconResult(warp(v_minus, phi), None, None, phi, trace, warnings)


def _run_deform_only(v_minus, projections, geoms, cfg) -> ReconResult:
    """Free voxel-grid target jointly with u: coupling + smoothness, no R."""
    grid = v_minus.grid
    cgrid = control_grid(grid, cfg.control_divisor)
    # from-scratch voxel target: the ablation swaps v(g) for an unconstrained
    # volume, so it starts empty rather than inheriting v-
    vfree = np.zeros(grid.dims)
    u = np.zeros(cgrid.dims + (3,))
    trace = []
    warnings = []
    best_total = np.inf
    best_u = u.copy()
    best_it = -1
    state_v = adam_init([vfree], cfg.beta1, cfg.beta2, cfg.eps)
    state_u = adam_init([u], cfg.beta1, cfg.beta2, cfg.eps)

    def eval_terms(vf, ud, with_grad=True):
        u_field = VelocityField(cgrid, ud)
        u_full = upsample_velocity(u_field, grid)
        phi_flat, chain = _integrate_cache(u_full, cfg.steps)
        phi = DeformationField(grid, phi_flat.reshape(grid.dims + (3,)))
        warped = warp(v_minus, phi)
        l2, perc, grad_warped = _projection_terms(warped, projections, geoms, cfg.lambda2, cfg.lambda_p)
        diff = vf - warped.data
        coupling = cfg.lambda_s * float(np.sum(diff * diff))
        smooth, g_smooth = smoothness_loss(u_field, cfg.lambda_d)
        terms = {"proj_l2": l2, "proj_perc": perc, "coupling": coupling, "smoothness": smooth, "reg": 0.0}
        if not with_grad:
            return terms, None, None
        grad_v = 2.0 * cfg.lambda_s * diff
        _, grad_phi = warp_vjp(v_minus, phi, grad_warped - grad_v)
        g_ufull = integrate_velocity_vjp(u_full, cfg.steps, grad_phi, chain)
        u_grad = np.stack([_resample_adjoint_comp(g_ufull, c, cgrid, grid) for c in range(3)], axis=-1)
        u_grad += g_smooth
        return terms, grad_v, u_grad

    for it in range(cfg.main_iters):
        terms, grad_v, u_grad = eval_terms(vfree, u)
        total = _check_terms(terms, "main", it)
        trace.append(_trace_row(it, "main", terms, total))
        if total < best_total:
            best_total, best_u, best_it = total, u.copy(), it
        state_v, (vfree,) = adam_step(state_v, [vfree], [grad_v], cfg.lr_g)
        state_u, (u,) = adam_step(state_u, [u], [u_grad], cfg.lr_u)
    if cfg.main_iters > 0:
        terms, _, _ = eval_terms(vfree, u, with_grad=False)
        total = _check_terms(terms, "main", cfg.main_iters)
        if total < best_total:
            best_u, best_it = u.copy(), cfg.main_iters
        if best_it >= int(_LATE_FRACTION * cfg.main_iters):
            warnings.append("main phase was still improving when the iteration budget ran out")
    u_field = VelocityField(cgrid, best_u)
    phi = integrate_velocity(upsample_velocity(u_field, grid), cfg.steps)
    return ReconResult(warp(v_minus, phi), None, u_field, phi, trace, warnings)


# ------------------------------------------------------------ result bundle

def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in trace:
            writer.writerow(row)


def read_trace_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            row = {"iteration": int(raw["iteration"]), "phase": raw["phase"]}
            for key in TRACE_COLUMNS[2:]:
                row[key] = float(raw[key])
            rows.append(row)
        return rows


def write_result_bundle(out_dir, result: ReconResult, cfg: ReconConfig, wall_time_s: float, case_name: str | None = None) -> None:
    """recovered GVOL + g/u/phi serializations + trace CSV + metadata JSON."""
    os.makedirs(out_dir, exist_ok=True)
    write_gvol(os.path.join(out_dir, "recovered.gvol"), result.volume)
    write_trace_csv(os.path.join(out_dir, "trace.csv"), result.trace)
    if result.g is not None:
        noise_files = []
        for s, noise in enumerate(result.g.n):
            name = f"g_noise_s{s}.gvol"
            write_gvol(
                os.path.join(out_dir, name),
                Volume(scale_grid(result.volume.grid, noise.shape), noise),
            )
            noise_files.append(name)
        with open(os.path.join(out_dir, "g.json"), "w") as fh:
            json.dump({"w": result.g.w.tolist(), "noise_files": noise_files}, fh, indent=1)
            fh.write("\n")
    if result.u is not None:
        save_field(out_dir, "u", result.u, "velocity")
    if result.phi is not None:
        save_field(out_dir, "phi", result.phi, "deformation")
    meta = {
        "seed": cfg.seed,
        "variant": cfg.variant,
        "config_hash": config_hash(cfg),
        "wall_time_s": wall_time_s,
        "warnings": result.warnings,
        "config": cfg.to_dict(),
    }
    if case_name is not None:
        meta["case"] = case_name
    with open(os.path.join(out_dir, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


def load_result_bundle(dir_path) -> SimpleNamespace:
    """Reload what evaluation needs: volume, fields, g, trace, metadata."""
    volume = read_gvol(os.path.join(dir_path, "recovered.gvol"))
    with open(os.path.join(dir_path, "metadata.json")) as fh:
        meta = json.load(fh)
    trace = read_trace_csv(os.path.join(dir_path, "trace.csv"))
    g = None
    g_path = os.path.join(dir_path, "g.json")
    if os.path.exists(g_path):
        with open(g_path) as fh:
            doc = json.load(fh)
        noise = [read_gvol(os.path.join(dir_path, name)).data for name in doc["noise_files"]]
        g = LatentParams(np.asarray(doc["w"], dtype=np.float64), noise)
    u = load_field(dir_path, "u") if os.path.exists(os.path.join(dir_path, "u.json")) else None
    phi = load_field(dir_path, "phi") if os.path.exists(os.path.join(dir_path, "phi.json")) else None
    return SimpleNamespace(volume=volume, g=g, u=u, phi=phi, trace=trace, metadata=meta)
