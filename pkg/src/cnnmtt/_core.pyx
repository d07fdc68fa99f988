# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterization kernels. Semantics mirror ``_core_py`` exactly."""

from libc.math cimport atan2, ceil, cos, exp, floor, sin, sqrt, M_PI, fabs

cdef inline double _wrap(double a) nogil:
    # (-pi, pi]
    a = a - 2.0 * M_PI * floor((a + M_PI) / (2.0 * M_PI))
    if a == -M_PI:
        a = M_PI
    return a


cdef inline Py_ssize_t _lo(double x, double origin, double rho, Py_ssize_t n) nogil:
    cdef double v = ceil((x - origin) / rho)
    if v < 0:
        return 0
    if v > n:
        return n
    return <Py_ssize_t>v


cdef inline Py_ssize_t _hi(double x, double origin, double rho, Py_ssize_t n) nogil:
    # exclusive upper bound
    cdef double v = floor((x - origin) / rho) + 1
    if v < 0:
        return 0
    if v > n:
        return n
    return <Py_ssize_t>v


def splat_gaussian(double[:, ::1] out, const double[::1] xs, const double[::1] ys,
                   double origin_x, double origin_y, double rho,
                   double sigma, double radius):
    """Add unit-mass isotropic Gaussian pulses centered at (xs, ys) into ``out[i, j]``."""
    cdef Py_ssize_t nx = out.shape[0], ny = out.shape[1]
    cdef Py_ssize_t k, i, j, i0, i1, j0, j1
    cdef double norm = 1.0 / (2.0 * M_PI * sigma * sigma)
    cdef double inv2s2 = 0.5 / (sigma * sigma)
    cdef double r2 = radius * radius
    cdef double px, py, dx, dy, d2
    with nogil:
        for k in range(xs.shape[0]):
            px = xs[k]
            py = ys[k]
            i0 = _lo(px - radius, origin_x, rho, nx)
            i1 = _hi(px + radius, origin_x, rho, nx)
            j0 = _lo(py - radius, origin_y, rho, ny)
            j1 = _hi(py + radius, origin_y, rho, ny)
            for i in range(i0, i1):
                dx = origin_x + i * rho - px
                for j in range(j0, j1):
                    dy = origin_y + j * rho - py
                    d2 = dx * dx + dy * dy
                    if d2 <= r2:
                        out[i, j] += norm * exp(-d2 * inv2s2)


cdef void _sector_bbox(double sx, double sy, double r, double b, double dr, double db,
                       double* xmin, double* xmax, double* ymin, double* ymax) noexcept nogil:
    cdef double r0 = r - dr
    cdef double r1 = r + dr
    cdef double t0 = b - db
    cdef double t1 = b + db
    cdef double c, s, ang
    cdef int m, q
    if r0 < 0:
        r0 = 0
    if db >= M_PI:
        xmin[0] = sx - r1
        xmax[0] = sx + r1
        ymin[0] = sy - r1
        ymax[0] = sy + r1
        return
    xmin[0] = sx + r0 * cos(t0)
    xmax[0] = xmin[0]
    ymin[0] = sy + r0 * sin(t0)
    ymax[0] = ymin[0]
    for m in range(4):
        if m == 0:
            ang = t0
            c = r0
        elif m == 1:
            ang = t1
            c = r0
        elif m == 2:
            ang = t0
            c = r1
        else:
            ang = t1
            c = r1
        xmin[0] = min(xmin[0], sx + c * cos(ang))
        xmax[0] = max(xmax[0], sx + c * cos(ang))
        ymin[0] = min(ymin[0], sy + c * sin(ang))
        ymax[0] = max(ymax[0], sy + c * sin(ang))
    # axis directions crossed by the bearing interval extend the box to r1
    for q in range(-4, 5):
        ang = q * 0.5 * M_PI
        if t0 <= ang <= t1:
            xmin[0] = min(xmin[0], sx + r1 * cos(ang))
            xmax[0] = max(xmax[0], sx + r1 * cos(ang))
            ymin[0] = min(ymin[0], sy + r1 * sin(ang))
            ymax[0] = max(ymax[0], sy + r1 * sin(ang))


def splat_range_bearing(double[:, ::1] out, const double[::1] sx, const double[::1] sy,
                        const double[::1] ranges, const double[::1] bearings,
                        double sigma_r, double sigma_b, double nsig,
                        double origin_x, double origin_y, double rho):
    """Add range-bearing likelihoods g(z | p) of each measurement into ``out[i, j]``.

    Each term is a Gaussian in (range, bearing) divided by the pixel's range
    from its sensor, truncated outside +-nsig standard deviations. Pixels
    coincident with the sensor receive nothing.
    """
    cdef Py_ssize_t nx = out.shape[0], ny = out.shape[1]
    cdef Py_ssize_t k, i, j, i0, i1, j0, j1
    cdef double norm = 1.0 / (2.0 * M_PI * sigma_r * sigma_b)
    cdef double dr_max = nsig * sigma_r
    cdef double db_max = nsig * sigma_b
    cdef double xmin, xmax, ymin, ymax
    cdef double dx, dy, r, er, eb, px0, py0, rz, bz
    with nogil:
        for k in range(ranges.shape[0]):
            px0 = sx[k]
            py0 = sy[k]
            rz = ranges[k]
            bz = bearings[k]
            _sector_bbox(px0, py0, rz, bz, dr_max, db_max, &xmin, &xmax, &ymin, &ymax)
            i0 = _lo(xmin, origin_x, rho, nx)
            i1 = _hi(xmax, origin_x, rho, nx)
            j0 = _lo(ymin, origin_y, rho, ny)
            j1 = _hi(ymax, origin_y, rho, ny)
            for i in range(i0, i1):
                dx = origin_x + i * rho - px0
                for j in range(j0, j1):
                    dy = origin_y + j * rho - py0
                    r = sqrt(dx * dx + dy * dy)
                    if r == 0:
                        continue
                    er = r - rz
                    if fabs(er) > dr_max:
                        continue
                    eb = _wrap(bz - atan2(dy, dx))
                    if fabs(eb) > db_max:
                        continue
                    er = er / sigma_r
                    eb = eb / sigma_b
                    out[i, j] += norm * exp(-0.5 * (er * er + eb * eb)) / r
