"""Pure-numpy fallback for the compiled rasterization kernels in ``_core.pyx``."""

import math

import numpy as np


def _wrap(a):
    a = a - 2.0 * np.pi * np.floor((a + np.pi) / (2.0 * np.pi))
    return np.where(a == -np.pi, np.pi, a)


def _span(lo, hi, origin, rho, n):
    i0 = int(min(max(math.ceil((lo - origin) / rho), 0), n))
    i1 = int(min(max(math.floor((hi - origin) / rho) + 1, 0), n))
    return i0, i1


def splat_gaussian(out, xs, ys, origin_x, origin_y, rho, sigma, radius):
    nx, ny = out.shape
    norm = 1.0 / (2.0 * math.pi * sigma * sigma)
    inv2s2 = 0.5 / (sigma * sigma)
    r2 = radius * radius
    for px, py in zip(np.asarray(xs, float).tolist(), np.asarray(ys, float).tolist()):
        i0, i1 = _span(px - radius, px + radius, origin_x, rho, nx)
        j0, j1 = _span(py - radius, py + radius, origin_y, rho, ny)
        if i0 >= i1 or j0 >= j1:
            continue
        dx = origin_x + np.arange(i0, i1) * rho - px
        dy = origin_y + np.arange(j0, j1) * rho - py
        d2 = dx[:, None] * dx[:, None] + dy[None, :] * dy[None, :]
        out[i0:i1, j0:j1] += np.where(d2 <= r2, norm * np.exp(-d2 * inv2s2), 0.0)


def _sector_bbox(sx, sy, r, b, dr, db):
    r0, r1 = max(r - dr, 0.0), r + dr
    t0, t1 = b - db, b + db
    if db >= math.pi:
        return sx - r1, sx + r1, sy - r1, sy + r1
    pts = [(c, a) for c in (r0, r1) for a in (t0, t1)]
    pts += [(r1, q * 0.5 * math.pi) for q in range(-4, 5) if t0 <= q * 0.5 * math.pi <= t1]
    xs = [sx + c * math.cos(a) for c, a in pts]
    ys = [sy + c * math.sin(a) for c, a in pts]
    return min(xs), max(xs), min(ys), max(ys)


def splat_range_bearing(out, sx, sy, ranges, bearings, sigma_r, sigma_b, nsig, origin_x, origin_y, rho):
    nx, ny = out.shape
    norm = 1.0 / (2.0 * math.pi * sigma_r * sigma_b)
    dr_max, db_max = nsig * sigma_r, nsig * sigma_b
    cols = (np.asarray(a, float).tolist() for a in (sx, sy, ranges, bearings))
    for x0, y0, rz, bz in zip(*cols):
        xmin, xmax, ymin, ymax = _sector_bbox(x0, y0, rz, bz, dr_max, db_max)
        i0, i1 = _span(xmin, xmax, origin_x, rho, nx)
        j0, j1 = _span(ymin, ymax, origin_y, rho, ny)
        if i0 >= i1 or j0 >= j1:
            continue
        dx = (origin_x + np.arange(i0, i1) * rho - x0)[:, None]
        dy = (origin_y + np.arange(j0, j1) * rho - y0)[None, :]
        r = np.sqrt(dx * dx + dy * dy)
        er = r - rz
        eb = _wrap(bz - np.arctan2(dy, dx))
        keep = (r != 0) & (np.abs(er) <= dr_max) & (np.abs(eb) <= db_max)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = norm * np.exp(-0.5 * ((er / sigma_r) ** 2 + (eb / sigma_b) ** 2)) / r
        out[i0:i1, j0:j1] += np.where(keep, val, 0.0)
