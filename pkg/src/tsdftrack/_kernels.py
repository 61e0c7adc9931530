"""Compiled inner loops for the voxel grid.

All kernels take the ``field`` array: normalized TSDF values with NaN at
unobserved voxels, so a single NaN check covers the 8-corner validity test.
Grid coordinates are continuous voxel indices with voxel centers at integers.
"""

import math

import numba as nb
import numpy as np

_opts = dict(cache=True, nogil=True)


@nb.njit(**_opts)
def integrate_kernel(values, weights, field, origin, voxel_size, rot_wc, trans_wc,
                     depth, fx, fy, cx, cy, trunc, max_weight, max_depth):
    """Projective voxel update. ``rot_wc``/``trans_wc`` map world into camera."""
    nx, ny, nz = values.shape
    h, w = depth.shape
    for i in range(nx):
        gx = origin[0] + (i + 0.5) * voxel_size
        for j in range(ny):
            gy = origin[1] + (j + 0.5) * voxel_size
            bx = rot_wc[0, 0] * gx + rot_wc[0, 1] * gy + trans_wc[0]
            by = rot_wc[1, 0] * gx + rot_wc[1, 1] * gy + trans_wc[1]
            bz = rot_wc[2, 0] * gx + rot_wc[2, 1] * gy + trans_wc[2]
            for l in range(nz):
                gz = origin[2] + (l + 0.5) * voxel_size
                z = bz + rot_wc[2, 2] * gz
                if z <= 0.0:
                    continue
                x = bx + rot_wc[0, 2] * gz
                y = by + rot_wc[1, 2] * gz
                u = fx * x / z + cx
                v = fy * y / z + cy
                if u < -0.5 or v < -0.5 or u >= w - 0.5 or v >= h - 0.5:
                    continue
                pu = int(math.floor(u + 0.5))
                pv = int(math.floor(v + 0.5))
                d = depth[pv, pu]
                if not (d > 0.0) or d >= max_depth:
                    continue
                sdf = d - z
                if sdf <= -trunc:
                    continue
                tsdf = sdf / trunc
                if tsdf > 1.0:
                    tsdf = 1.0
                wt = weights[i, j, l]
                val = (values[i, j, l] * wt + tsdf) / (wt + 1.0)
                values[i, j, l] = val
                field[i, j, l] = val
                weights[i, j, l] = min(wt + 1.0, max_weight)


@nb.njit(inline="always")
def _trilinear(field, gx, gy, gz):
    nx, ny, nz = field.shape
    if not (gx >= 0.0 and gy >= 0.0 and gz >= 0.0):
        return np.nan
    i = int(gx)
    j = int(gy)
    l = int(gz)
    if i >= nx - 1 or j >= ny - 1 or l >= nz - 1:
        return np.nan
    fx = gx - i
    fy = gy - j
    fz = gz - l
    # promote before differencing: float32 differences lose ~1e-8
    c000 = np.float64(field[i, j, l])
    c001 = np.float64(field[i, j, l + 1])
    c010 = np.float64(field[i, j + 1, l])
    c011 = np.float64(field[i, j + 1, l + 1])
    c100 = np.float64(field[i + 1, j, l])
    c101 = np.float64(field[i + 1, j, l + 1])
    c110 = np.float64(field[i + 1, j + 1, l])
    c111 = np.float64(field[i + 1, j + 1, l + 1])
    c00 = c000 + (c001 - c000) * fz
    c01 = c010 + (c011 - c010) * fz
    c10 = c100 + (c101 - c100) * fz
    c11 = c110 + (c111 - c110) * fz
    c0 = c00 + (c01 - c00) * fy
    c1 = c10 + (c11 - c10) * fy
    return c0 + (c1 - c0) * fx


@nb.njit(**_opts)
def query_kernel(field, grid_points, out):
    for n in range(grid_points.shape[0]):
        out[n] = _trilinear(field, grid_points[n, 0], grid_points[n, 1], grid_points[n, 2])


@nb.njit(**_opts)
def fitness_kernel(field, grid_points, rots, trans, sums, counts):
    """Sum of |value| and valid count for every candidate transform.

    ``grid_points`` are already in grid coordinates; each candidate ``k``
    maps them by ``rots[k] @ p + trans[k]`` (also in grid units).
    Points are the outer loop: candidates are small perturbations, so the
    voxels they hit for one point stay cache-resident.
    """
    n_cand = rots.shape[0]
    for n in range(grid_points.shape[0]):
        x = grid_points[n, 0]
        y = grid_points[n, 1]
        z = grid_points[n, 2]
        for k in range(n_cand):
            gx = rots[k, 0, 0] * x + rots[k, 0, 1] * y + rots[k, 0, 2] * z + trans[k, 0]
            gy = rots[k, 1, 0] * x + rots[k, 1, 1] * y + rots[k, 1, 2] * z + trans[k, 1]
            gz = rots[k, 2, 0] * x + rots[k, 2, 1] * y + rots[k, 2, 2] * z + trans[k, 2]
            v = _trilinear(field, gx, gy, gz)
            if v == v:
                sums[k] += abs(v)
                counts[k] += 1


@nb.njit(**_opts)
def raycast_kernel(field, origin_grid, dirs_grid, step, max_steps, out_t):
    """March each ray in grid units; record the parameter of the first +/- crossing."""
    for r in range(dirs_grid.shape[0]):
        dx = dirs_grid[r, 0]
        dy = dirs_grid[r, 1]
        dz = dirs_grid[r, 2]
        prev = np.nan
        out_t[r] = np.nan
        for s in range(1, max_steps + 1):
            t = s * step
            v = _trilinear(field, origin_grid[0] + t * dx, origin_grid[1] + t * dy,
                           origin_grid[2] + t * dz)
            if v == v:
                if prev == prev and prev > 0.0 and v <= 0.0:
                    out_t[r] = t - step + step * prev / (prev - v)
                    break
                prev = v
            else:
                prev = np.nan


SPHERE, BOX, PLANE, BOX_GRID, SPHERE_GRID = 0, 1, 2, 3, 4


@nb.njit(inline="always")
def _scene_sdf(kinds, ops, params, x, y, z):
    out = np.inf
    for m in range(kinds.shape[0]):
        p = params[m]
        kind = kinds[m]
        if kind == SPHERE:
            dx = x - p[0]
            dy = y - p[1]
            dz = z - p[2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz) - p[3]
        elif kind == BOX:
            qx = abs(x - p[0]) - p[3]
            qy = abs(y - p[1]) - p[4]
            qz = abs(z - p[2]) - p[5]
            ox = max(qx, 0.0)
            oy = max(qy, 0.0)
            oz = max(qz, 0.0)
            d = math.sqrt(ox * ox + oy * oy + oz * oz) + min(max(qx, max(qy, qz)), 0.0)
        elif kind == PLANE:
            d = p[0] * x + p[1] * y + p[2] * z - p[3]
        else:
            # clamped repetition of one box or sphere; exact while each copy stays within its cell
            rx = x - p[0]
            ry = y - p[1]
            rz = z - p[2]
            if p[6] > 0.0:
                rx -= p[6] * min(max(math.floor(rx / p[6] + 0.5), -p[9]), p[9])
            if p[7] > 0.0:
                ry -= p[7] * min(max(math.floor(ry / p[7] + 0.5), -p[10]), p[10])
            if p[8] > 0.0:
                rz -= p[8] * min(max(math.floor(rz / p[8] + 0.5), -p[11]), p[11])
            if kind == SPHERE_GRID:
                d = math.sqrt(rx * rx + ry * ry + rz * rz) - p[3]
            else:
                qx = abs(rx) - p[3]
                qy = abs(ry) - p[4]
                qz = abs(rz) - p[5]
                ox = max(qx, 0.0)
                oy = max(qy, 0.0)
                oz = max(qz, 0.0)
                d = math.sqrt(ox * ox + oy * oy + oz * oz) + min(max(qx, max(qy, qz)), 0.0)
        if ops[m] == 0:
            out = min(out, d)
        else:
            out = max(out, -d)
    return out


@nb.njit(**_opts)
def scene_eval_kernel(kinds, ops, params, points, out):
    for n in range(points.shape[0]):
        out[n] = _scene_sdf(kinds, ops, params, points[n, 0], points[n, 1], points[n, 2])


@nb.njit(**_opts)
def sphere_trace_kernel(kinds, ops, params, origin, dirs, eps, max_t, max_steps, out_t):
    """Ray parameter of the first surface hit per unit direction; NaN on a miss."""
    ox, oy, oz = origin[0], origin[1], origin[2]
    for r in range(dirs.shape[0]):
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        t = 0.0
        out_t[r] = np.nan
        for _ in range(max_steps):
            d = _scene_sdf(kinds, ops, params, ox + t * dx, oy + t * dy, oz + t * dz)
            if abs(d) < eps:
                out_t[r] = t
                break
            t += d
            if t > max_t or t < 0.0:
                break
