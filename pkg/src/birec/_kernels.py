"""Numba kernels for the sampling and ray-marching hot loops.

All kernels are single-threaded and run in a fixed iteration order, so
results are bit-reproducible. Sample positions are continuous voxel
coordinates; coordinates outside [0, n-1] per axis read as 0 (zero padding)
and scatter nothing.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def field_sample(field, px, py, pz, out):
    # field: (nx, ny, nz, C); px/py/pz: (N,); out: (N, C)
    nx, ny, nz, nc = field.shape
    n = px.shape[0]
    for i in range(n):
        x = px[i]
        y = py[i]
        z = pz[i]
        ix = int(np.floor(x))
        iy = int(np.floor(y))
        iz = int(np.floor(z))
        fx = x - ix
        fy = y - iy
        fz = z - iz
        for c in range(nc):
            out[i, c] = 0.0
        for dx in range(2):
            xx = ix + dx
            if xx < 0 or xx >= nx:
                continue
            wx = fx if dx == 1 else 1.0 - fx
            for dy in range(2):
                yy = iy + dy
                if yy < 0 or yy >= ny:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dz in range(2):
                    zz = iz + dz
                    if zz < 0 or zz >= nz:
                        continue
                    w = wx * wy * (fz if dz == 1 else 1.0 - fz)
                    for c in range(nc):
                        out[i, c] += w * field[xx, yy, zz, c]


@njit(cache=True)
def field_scatter_add(gfield, px, py, pz, upstream):
    # Transpose of field_sample: gfield (nx,ny,nz,C) += weights * upstream.
    nx, ny, nz, nc = gfield.shape
    n = px.shape[0]
    for i in range(n):
        x = px[i]
        y = py[i]
        z = pz[i]
        ix = int(np.floor(x))
        iy = int(np.floor(y))
        iz = int(np.floor(z))
        fx = x - ix
        fy = y - iy
        fz = z - iz
        for dx in range(2):
            xx = ix + dx
            if xx < 0 or xx >= nx:
                continue
            wx = fx if dx == 1 else 1.0 - fx
            for dy in range(2):
                yy = iy + dy
                if yy < 0 or yy >= ny:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dz in range(2):
                    zz = iz + dz
                    if zz < 0 or zz >= nz:
                        continue
                    w = wx * wy * (fz if dz == 1 else 1.0 - fz)
                    for c in range(nc):
                        gfield[xx, yy, zz, c] += w * upstream[i, c]


@njit(cache=True)
def field_pos_grad(field, px, py, pz, upstream, out_pos):
    # out_pos[i, a] = sum_c upstream[i, c] * d(sample_c)/d(pos_a), the
    # analytic derivative of trilinear interpolation w.r.t. the position.
    nx, ny, nz, nc = field.shape
    n = px.shape[0]
    for i in range(n):
        x = px[i]
        y = py[i]
        z = pz[i]
        ix = int(np.floor(x))
        iy = int(np.floor(y))
        iz = int(np.floor(z))
        fx = x - ix
        fy = y - iy
        fz = z - iz
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for dx in range(2):
            xx = ix + dx
            if xx < 0 or xx >= nx:
                continue
            wx = fx if dx == 1 else 1.0 - fx
            sx = 1.0 if dx == 1 else -1.0
            for dy in range(2):
                yy = iy + dy
                if yy < 0 or yy >= ny:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                sy = 1.0 if dy == 1 else -1.0
                for dz in range(2):
                    zz = iz + dz
                    if zz < 0 or zz >= nz:
                        continue
                    wz = fz if dz == 1 else 1.0 - fz
                    sz = 1.0 if dz == 1 else -1.0
                    up = 0.0
                    for c in range(nc):
                        up += upstream[i, c] * field[xx, yy, zz, c]
                    gx += sx * wy * wz * up
                    gy += wx * sy * wz * up
                    gz += wx * wy * sz * up
        out_pos[i, 0] = gx
        out_pos[i, 1] = gy
        out_pos[i, 2] = gz


@njit(cache=True)
def project_rays(vol, ox, oy, oz, dx, dy, dz, t0, t1, step, out):
    # Midpoint-rule line integrals. Ray p(t) = o + t*d with o in voxel
    # coordinates, d in voxel coordinates per mm, t in mm; [t0, t1] is the
    # clipped segment. K = ceil(length/step) samples at t0 + (k+0.5)*step.
    nx, ny, nz = vol.shape
    npix = ox.shape[0]
    for p in range(npix):
        a = t0[p]
        b = t1[p]
        if not b > a:
            out[p] = 0.0
            continue
        nk = int(np.ceil((b - a) / step))
        acc = 0.0
        for k in range(nk):
            t = a + (k + 0.5) * step
            x = ox[p] + t * dx[p]
            y = oy[p] + t * dy[p]
            z = oz[p] + t * dz[p]
            ix = int(np.floor(x))
            iy = int(np.floor(y))
            iz = int(np.floor(z))
            fx = x - ix
            fy = y - iy
            fz = z - iz
            for di in range(2):
                xx = ix + di
                if xx < 0 or xx >= nx:
                    continue
                wx = fx if di == 1 else 1.0 - fx
                for dj in range(2):
                    yy = iy + dj
                    if yy < 0 or yy >= ny:
                        continue
                    wy = fy if dj == 1 else 1.0 - fy
                    for dk in range(2):
                        zz = iz + dk
                        if zz < 0 or zz >= nz:
                            continue
                        acc += wx * wy * (fz if dk == 1 else 1.0 - fz) * vol[xx, yy, zz]
        out[p] = acc * step


@njit(cache=True)
def project_rays_adjoint(gvol, ox, oy, oz, dx, dy, dz, t0, t1, step, residual):
    # Exact transpose of project_rays: scatter step*residual[p] through the
    # same sample weights. Sequential over pixels, deterministic.
    nx, ny, nz = gvol.shape
    npix = ox.shape[0]
    for p in range(npix):
        a = t0[p]
        b = t1[p]
        if not b > a:
            continue
        r = residual[p] * step
        if r == 0.0:
            continue
        nk = int(np.ceil((b - a) / step))
        for k in range(nk):
            t = a + (k + 0.5) * step
            x = ox[p] + t * dx[p]
            y = oy[p] + t * dy[p]
            z = oz[p] + t * dz[p]
            ix = int(np.floor(x))
            iy = int(np.floor(y))
            iz = int(np.floor(z))
            fx = x - ix
            fy = y - iy
            fz = z - iz
            for di in range(2):
                xx = ix + di
                if xx < 0 or xx >= nx:
                    continue
                wx = fx if di == 1 else 1.0 - fx
                for dj in range(2):
                    yy = iy + dj
                    if yy < 0 or yy >= ny:
                        continue
                    wy = fy if dj == 1 else 1.0 - fy
                    for dk in range(2):
                        zz = iz + dk
                        if zz < 0 or zz >= nz:
                            continue
                        gvol[xx, yy, zz] += wx * wy * (fz if dk == 1 else 1.0 - fz) * r
