import numpy as np
import pytest

from birec.deform import (
    DeformationField,
    RegisterConfig,
    VelocityField,
    compose_displacements,
    control_grid,
    integrate_velocity,
    integrate_velocity_vjp,
    invert_displacement,
    jacobian_det,
    load_field,
    register,
    save_field,
    smoothness_loss,
    spatial_transform,
    upsample_velocity,
    warp,
    warp_vjp,
)
from birec.errors import UsageError
from birec.volume import Grid3, Volume

from helpers import check_directional, small_grid, smooth_velocity, smooth_volume


def _grid(n=8, spacing=2.0):
    return small_grid(n, spacing)


def test_field_shape_validation(grid8):
    with pytest.raises(UsageError):
        VelocityField(grid8, np.zeros((8, 8, 8)))
    with pytest.raises(UsageError):
        DeformationField(grid8, np.zeros((4, 4, 4, 3)))


def test_integrate_zero_velocity_is_identity(grid8):
    u = VelocityField(grid8, np.zeros(grid8.dims + (3,)))
    phi = integrate_velocity(u)
    assert np.all(phi.data == 0.0)


def test_integrate_steps_validation(grid8):
    u = VelocityField(grid8, np.zeros(grid8.dims + (3,)))
    with pytest.raises(UsageError, match="steps"):
        integrate_velocity(u, steps=0)


def test_integrate_constant_velocity():
    # exp of a constant field is translation by that constant. Zero padding
    # contaminates each doubling by about one voxel plus the current
    # displacement inward from the border, so only a deep interior is exact.
    grid = _grid(16, 2.0)
    c = np.array([1.5, -2.0, 0.75])
    u = VelocityField(grid, np.broadcast_to(c, grid.dims + (3,)).copy())
    phi = integrate_velocity(u, steps=4)
    interior = phi.data[6:-6, 6:-6, 6:-6]
    assert np.allclose(interior, c, atol=1e-12)


def test_integrate_matches_flow_oracle():
    # for a linear velocity field u(x) = a*x along one axis, the exact flow
    # is x(1) = x0 * exp(a); displacement = x0*(exp(a) - 1)
    grid = _grid(16, 2.0)
    a = 0.05  # per mm of world x
    x_world = grid.voxel_centers_world()[..., 0]
    data = np.zeros(grid.dims + (3,))
    data[..., 0] = a * x_world
    phi = integrate_velocity(VelocityField(grid, data), steps=8)
    expect = x_world * np.expm1(a)
    interior = (slice(3, -3),) * 3
    assert np.allclose(phi.data[interior + (0,)], expect[interior], rtol=2e-3, atol=1e-4)
    assert np.allclose(phi.data[interior + (1,)], 0.0, atol=1e-9)


def test_integrate_positive_jacobian_for_smooth_fields():
    grid = _grid(16, 2.0)
    for seed in range(10):
        u = smooth_velocity(grid, seed=seed, max_norm_mm=4.0)
        det = jacobian_det(integrate_velocity(u))
        assert det.data.min() > 0.0


def test_inverse_consistency_interior():
    grid = _grid(32, 2.0)
    for seed in range(5):
        u = smooth_velocity(grid, seed=seed, max_norm_mm=4.0)
        fwd = integrate_velocity(u)
        bwd = integrate_velocity(VelocityField(grid, -u.data))
        comp = compose_displacements(fwd, bwd)
        vox = comp.data / np.array(grid.spacing)
        interior = vox[4:-4, 4:-4, 4:-4]
        worst = float(np.linalg.norm(interior, axis=-1).max())
        assert worst <= 0.05, f"seed {seed}: inverse residual {worst:.4f} voxels"


def test_integrate_velocity_vjp_fd(rng):
    grid = _grid(5, 2.0)
    u0 = smooth_velocity(grid, seed=2, max_norm_mm=1.0)
    q = rng.standard_normal(grid.dims + (3,))

    def f(x):
        u = VelocityField(grid, x.reshape(grid.dims + (3,)))
        phi = integrate_velocity(u, steps=4)
        val = float(np.sum(phi.data * q))
        grad = integrate_velocity_vjp(u, 4, q)
        return val, grad.ravel()

    check_directional(f, u0.data.ravel(), rng, n_dirs=4, eps=1e-5, tol=1e-3)


def test_warp_zero_is_exact_copy(grid8, vol8):
    phi = DeformationField(grid8, np.zeros(grid8.dims + (3,)))
    out = warp(vol8, phi)
    assert np.array_equal(out.data, vol8.data)


def test_warp_translation_matches_roll(grid8, vol8):
    # pull-back by exactly one voxel spacing along +x: out[i] = v[i+1]
    phi_data = np.zeros(grid8.dims + (3,))
    phi_data[..., 0] = grid8.spacing[0]
    out = warp(vol8, DeformationField(grid8, phi_data))
    assert np.allclose(out.data[:-1], vol8.data[1:], atol=1e-12)
    assert np.allclose(out.data[-1], 0.0)  # zero padding past the boundary


def test_warp_grid_mismatch(vol8):
    other = _grid(6, 2.0)
    with pytest.raises(UsageError, match="grid"):
        warp(vol8, DeformationField(other, np.zeros(other.dims + (3,))))


def test_warp_vjp_fd(rng):
    grid = _grid(6, 2.0)
    v0 = smooth_volume(grid, seed=3)
    phi0 = smooth_velocity(grid, seed=4, max_norm_mm=1.3)  # used as displacement
    q = rng.standard_normal(grid.dims)

    def f_v(x):
        v = Volume(grid, x.reshape(grid.dims))
        phi = DeformationField(grid, phi0.data)
        val = float(np.sum(warp(v, phi).data * q))
        gv, _ = warp_vjp(v, phi, q)
        return val, gv.ravel()

    def f_phi(x):
        phi = DeformationField(grid, x.reshape(grid.dims + (3,)))
        val = float(np.sum(warp(v0, phi).data * q))
        _, gp = warp_vjp(v0, phi, q)
        return val, gp.ravel()

    check_directional(f_v, v0.data.ravel(), rng, n_dirs=3, eps=1e-6, tol=1e-3)
    check_directional(f_phi, phi0.data.ravel(), rng, n_dirs=3, eps=1e-6, tol=1e-3)


def test_smoothness_loss_brute_force(rng):
    grid = _grid(5, 2.0)
    data = rng.standard_normal(grid.dims + (3,))
    u = VelocityField(grid, data)
    lam = 0.7
    loss, grad = smoothness_loss(u, lam)
    want = 0.0
    for ax in range(3):
        want += float(np.sum(np.diff(data, axis=ax) ** 2))
    assert loss == pytest.approx(lam * want, rel=1e-12)

    def f(x):
        l, g = smoothness_loss(VelocityField(grid, x.reshape(grid.dims + (3,))), lam)
        return l, g.ravel()

    check_directional(f, data.ravel(), rng, n_dirs=3, eps=1e-6, tol=1e-6)


def test_jacobian_det_affine_field():
    # phi(p) = (A - I) p in mm gives det(I + d(phi)/dp) = det(A) exactly
    # for the interior central differences
    grid = _grid(8, 2.0)
    amat = np.array([[1.1, 0.05, 0.0], [0.0, 0.9, -0.04], [0.02, 0.0, 1.05]])
    pts = grid.voxel_centers_world()
    disp = (pts.reshape(-1, 3) @ (amat - np.eye(3)).T).reshape(grid.dims + (3,))
    det = jacobian_det(DeformationField(grid, disp))
    assert np.allclose(det.data[1:-1, 1:-1, 1:-1], np.linalg.det(amat), atol=1e-12)
    assert np.all(det.data[0] == 1.0)  # border convention


def test_jacobian_det_identity(grid8):
    phi = DeformationField(grid8, np.zeros(grid8.dims + (3,)))
    assert np.all(jacobian_det(phi).data == 1.0)


def test_invert_displacement_translation():
    grid = _grid(10, 2.0)
    data = np.zeros(grid.dims + (3,))
    data[:] = (2.0, -1.0, 0.5)
    psi = invert_displacement(DeformationField(grid, data))
    assert np.allclose(psi.data[2:-2, 2:-2, 2:-2], (-2.0, 1.0, -0.5), atol=1e-9)


def test_compose_translations():
    grid = _grid(10, 2.0)
    a = np.zeros(grid.dims + (3,))
    a[:] = (2.0, 0.0, -1.0)
    b = np.zeros(grid.dims + (3,))
    b[:] = (-0.5, 1.0, 0.0)
    comp = compose_displacements(DeformationField(grid, a), DeformationField(grid, b))
    assert np.allclose(comp.data[2:-2, 2:-2, 2:-2], (1.5, 1.0, -1.0), atol=1e-9)


def test_compose_grid_mismatch():
    g1, g2 = _grid(8, 2.0), _grid(6, 2.0)
    with pytest.raises(UsageError, match="grids must match"):
        compose_displacements(
            DeformationField(g1, np.zeros(g1.dims + (3,))),
            DeformationField(g2, np.zeros(g2.dims + (3,))),
        )


def test_upsample_velocity_constant():
    coarse = _grid(4, 8.0)
    fine = _grid(16, 2.0)
    data = np.zeros(coarse.dims + (3,))
    data[:] = (1.0, 2.0, 3.0)
    up = upsample_velocity(VelocityField(coarse, data), fine)
    # interior of the fine grid lies inside the coarse cell span
    assert np.allclose(up.data[2:-2, 2:-2, 2:-2], (1.0, 2.0, 3.0), atol=1e-12)


def test_control_grid_dims_and_extent():
    grid = Grid3((64, 64, 64), (2.0,) * 3, (-63.0,) * 3)
    c = control_grid(grid)
    assert c.dims == (16, 16, 16)
    for ax in range(3):
        lo_c = c.origin[ax] - c.spacing[ax] / 2.0
        lo_g = grid.origin[ax] - grid.spacing[ax] / 2.0
        assert lo_c == pytest.approx(lo_g, abs=1e-12)
    tiny = Grid3((6, 6, 6), (2.0,) * 3, (-5.0,) * 3)
    assert control_grid(tiny).dims == (2, 2, 2)


def test_register_recovers_smooth_deformation():
    # true field lives on the optimizer's own control grid, so the solve is
    # a pure optimization problem with zero parameterization gap
    grid = _grid(16, 2.0)
    v1 = smooth_volume(grid, seed=8, lo=0.1, hi=0.9)
    cgrid = control_grid(grid)
    raw = np.random.default_rng(9).standard_normal(cgrid.dims + (3,))
    coarse = VelocityField(cgrid, raw)
    u_full = upsample_velocity(coarse, grid)
    peak = float(np.linalg.norm(u_full.data, axis=-1).max())
    u_true = VelocityField(grid, u_full.data * (3.0 / peak))
    v2 = warp(v1, integrate_velocity(u_true))
    # light smoothness weight: the default one biases the optimum enough to
    # dominate the residual, which would hide optimizer regressions
    res = register(v1, v2, RegisterConfig(iters=40, lambda_d=0.01))
    warped, phi = spatial_transform(v1, res.u)
    err0 = float(np.mean((v1.data - v2.data) ** 2))
    err1 = float(np.mean((warped.data - v2.data) ** 2))
    assert err1 < 0.3 * err0
    assert res.objective_trace[-1] <= res.objective_trace[0]
    assert jacobian_det(phi).data.min() > 0.0


def test_spatial_transform_identity(vol8, grid8):
    cgrid = control_grid(grid8)
    u = VelocityField(cgrid, np.zeros(cgrid.dims + (3,)))
    out, phi = spatial_transform(vol8, u)
    assert np.array_equal(out.data, vol8.data)
    assert np.all(phi.data == 0.0)


def test_save_load_field_roundtrip(tmp_path):
    grid = _grid(6, 2.0)
    u = smooth_velocity(grid, seed=12, max_norm_mm=2.0)
    save_field(tmp_path, "vel", u, "velocity")
    back = load_field(tmp_path, "vel")
    assert isinstance(back, VelocityField)
    assert back.grid == grid
    assert np.array_equal(back.data, u.data.astype(np.float32).astype(np.float64))

    phi = integrate_velocity(u)
    save_field(tmp_path, "phi", phi, "deformation")
    back2 = load_field(tmp_path, "phi")
    assert isinstance(back2, DeformationField)
