# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Euler-Maruyama kernel (one path at a time, GIL released).

Operation order matches ``_fallback.py`` so the two agree to rounding.
"""

import numpy as np

from libc.math cimport sqrt, floor, fabs, isfinite, INFINITY


cdef inline void interp(const double[:, ::1] values, const double* x, int d, int n, double L,
                        double* out) noexcept nogil:
    cdef int k = values.shape[1]
    cdef double h = 2.0 * L / n
    cdef long idx0[3]
    cdef double frac[3]
    cdef int j, c, q
    cdef double s, fl, w
    cdef long flat, ij
    for j in range(d):
        s = (x[j] + L) / h
        fl = floor(s)
        frac[j] = s - fl
        ij = <long>fl % n
        if ij < 0:
            ij += n
        idx0[j] = ij
    for q in range(k):
        out[q] = 0.0
    for c in range(1 << d):
        w = 1.0
        flat = 0
        for j in range(d):
            if (c >> j) & 1:
                w = w * frac[j]
                ij = idx0[j] + 1
                if ij == n:
                    ij = 0
            else:
                w = w * (1.0 - frac[j])
                ij = idx0[j]
            flat = flat * n + ij
        for q in range(k):
            out[q] += w * values[flat, q]


cdef inline bint inside(const double* x, int d, double lim) noexcept nogil:
    cdef int j
    for j in range(d):
        if not fabs(x[j]) <= lim:
            return False
    return True


cdef inline double norm(const double* v, int d) noexcept nogil:
    cdef double acc = 0.0
    cdef int j
    for j in range(d):
        acc = acc + v[j] * v[j]
    return sqrt(acc)


cdef inline bint field(const double[:, ::1] values, const double* x, int d, int n, double L,
                       double lim, const double[::1] far, double* out) noexcept nogil:
    """Interpolate inside the box, far-field constant outside; returns True when off-grid."""
    cdef int q
    if inside(x, d, lim):
        interp(values, x, d, n, L, out)
        return False
    for q in range(far.shape[0]):
        out[q] = far[q]
    return True


def simulate_block(const double[:, ::1] x0, const double[:, :, ::1] noise, const long[::1] start_step,
                   double dt, const double[:, ::1] drift_grid, const double[:, ::1] diff_grid,
                   const double[:, ::1] map_grid, bint has_map, int n, double L,
                   const double[::1] far_drift, const double[::1] far_diff,
                   double[:, :, ::1] states_out, double[:, :, ::1] ystates_out, long stride,
                   double tol, int max_iter, double exit_radius, bint stop_on_exit):
    cdef Py_ssize_t P = noise.shape[0]
    cdef Py_ssize_t S = noise.shape[1]
    cdef int m = noise.shape[2]
    cdef int d = x0.shape[1]
    cdef double h = 2.0 * L / n
    cdef double lim = L - h
    cdef double sq = sqrt(dt)
    cdef bint record_y = ystates_out.shape[0] > 0

    exit_np = np.full(P, -1, dtype=np.int64)
    status_np = np.zeros(P, dtype=np.int8)
    xfin_np = np.array(x0, dtype=np.float64, copy=True)
    cdef long long[::1] exit_step = exit_np
    cdef signed char[::1] status = status_np
    cdef double[:, ::1] xfin = xfin_np
    cdef double[::1] zero_view = np.zeros(d)

    cdef double x[3]
    cdef double y[3]
    cdef double z[3]
    cdef double u[3]
    cdef double tmp[3]
    cdef double drift[3]
    cdef double diff[18]
    cdef double dw[6]
    cdef double acc, res
    cdef Py_ssize_t p, s, slot
    cdef int i, k, j, it
    cdef bint converged, ok
    cdef long long offgrid = 0

    with nogil:
        for p in range(P):
            for j in range(d):
                x[j] = x0[p, j]
            if has_map:
                if field(map_grid, x, d, n, L, lim, zero_view, u):
                    offgrid += 1
                for j in range(d):
                    y[j] = x[j] + u[j]
            else:
                for j in range(d):
                    y[j] = x[j]
            if norm(x, d) > exit_radius:
                exit_step[p] = start_step[p]
            if start_step[p] % stride == 0:
                slot = start_step[p] // stride
                for j in range(d):
                    states_out[p, slot, j] = x[j]
                    if record_y:
                        ystates_out[p, slot, j] = y[j]
            if stop_on_exit and exit_step[p] >= 0:
                continue
            for s in range(start_step[p], S):
                if field(drift_grid, x, d, n, L, lim, far_drift, drift):
                    offgrid += 1
                field(diff_grid, x, d, n, L, lim, far_diff, diff)
                for k in range(m):
                    dw[k] = noise[p, s, k] * sq
                for i in range(d):
                    acc = drift[i] * dt
                    for k in range(m):
                        acc = acc + diff[i * m + k] * dw[k]
                    tmp[i] = y[i] + acc
                ok = True
                if has_map:
                    for j in range(d):
                        z[j] = x[j]
                    converged = False
                    for it in range(max_iter + 1):
                        if field(map_grid, z, d, n, L, lim, zero_view, u):
                            offgrid += 1
                        # residual |z + u(z) - y|
                        res = 0.0
                        for j in range(d):
                            acc = (z[j] + u[j]) - tmp[j]
                            res = res + acc * acc
                        if sqrt(res) <= tol:
                            converged = True
                            break
                        if it == max_iter:
                            break
                        for j in range(d):
                            z[j] = tmp[j] - u[j]
                    if not converged:
                        status[p] = 1
                        ok = False
                else:
                    for j in range(d):
                        z[j] = tmp[j]
                for j in range(d):
                    if not (isfinite(z[j]) and isfinite(tmp[j])):
                        if status[p] == 0:
                            status[p] = 2
                        ok = False
                if not ok:
                    break
                for j in range(d):
                    x[j] = z[j]
                    y[j] = tmp[j]
                if norm(x, d) > exit_radius and exit_step[p] < 0:
                    exit_step[p] = s + 1
                    if (s + 1) % stride == 0:
                        slot = (s + 1) // stride
                        for j in range(d):
                            states_out[p, slot, j] = x[j]
                            if record_y:
                                ystates_out[p, slot, j] = y[j]
                    if stop_on_exit:
                        break
                    continue
                if (s + 1) % stride == 0:
                    slot = (s + 1) // stride
                    for j in range(d):
                        states_out[p, slot, j] = x[j]
                        if record_y:
                            ystates_out[p, slot, j] = y[j]
            for j in range(d):
                xfin[p, j] = x[j]
    return exit_np, status_np, xfin_np, offgrid
