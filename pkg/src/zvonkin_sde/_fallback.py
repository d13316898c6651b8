"""Pure-numpy Euler-Maruyama kernel, vectorised across paths.

Mirrors ``_kernels.pyx`` operation by operation (same interpolation corner
order, same accumulation order) so both back ends agree to rounding.
"""

from __future__ import annotations

import math

import numpy as np


def interp(values: np.ndarray, pts: np.ndarray, n: int, L: float) -> np.ndarray:
    """Multilinear periodic interpolation of ``values`` ``(n**d, k)`` at ``pts`` ``(P, d)``."""
    P, d = pts.shape
    h = 2.0 * L / n
    idx0 = np.empty((P, d), dtype=np.int64)
    frac = np.empty((P, d))
    for j in range(d):
        s = (pts[:, j] + L) / h
        fl = np.floor(s)
        frac[:, j] = s - fl
        idx0[:, j] = np.mod(fl.astype(np.int64), n)
    out = np.zeros((P, values.shape[1]))
    for c in range(1 << d):
        w = np.ones(P)
        flat = np.zeros(P, dtype=np.int64)
        for j in range(d):
            if (c >> j) & 1:
                w = w * frac[:, j]
                ij = idx0[:, j] + 1
                ij[ij == n] = 0
            else:
                w = w * (1.0 - frac[:, j])
                ij = idx0[:, j]
            flat = flat * n + ij
        out += w[:, None] * values[flat]
    return out


def _norm(v: np.ndarray) -> np.ndarray:
    acc = np.zeros(v.shape[0])
    for j in range(v.shape[1]):
        acc = acc + v[:, j] * v[:, j]
    return np.sqrt(acc)


def _inside(x: np.ndarray, lim: float) -> np.ndarray:
    return np.all(np.abs(x) <= lim, axis=1)


def _field(values, pts, n, L, lim, far):
    out = np.broadcast_to(far, (len(pts), len(far))).copy()
    ins = _inside(pts, lim)
    if ins.any():
        out[ins] = interp(values, pts[ins], n, L)
    return out, int((~ins).sum())


def simulate_block(x0, noise, start_step, dt, drift_grid, diff_grid, map_grid, has_map, n, L,
                   far_drift, far_diff, states_out, ystates_out, stride, tol, max_iter,
                   exit_radius, stop_on_exit):
    P, S, m = noise.shape
    d = x0.shape[1]
    h = 2.0 * L / n
    lim = L - h
    sq = math.sqrt(dt)
    record_y = ystates_out.shape[0] > 0
    zero_u = np.zeros(d)

    x = np.array(x0, dtype=float)
    exit_step = np.full(P, -1, dtype=np.int64)
    status = np.zeros(P, dtype=np.int8)
    offgrid = 0
    alive = np.ones(P, dtype=bool)
    if has_map:
        u0, off = _field(map_grid, x, n, L, lim, zero_u)
        offgrid += off
        y = x + u0
    else:
        y = x.copy()

    r0 = _norm(x)
    ex = r0 > exit_radius
    exit_step[ex] = start_step[ex]
    if stop_on_exit:
        alive &= ~ex
    at = (start_step % stride) == 0
    for p in np.flatnonzero(at):
        states_out[p, start_step[p] // stride] = x[p]
        if record_y:
            ystates_out[p, start_step[p] // stride] = y[p]

    s_begin = int(start_step.min()) if P else S
    for s in range(s_begin, S):
        act = np.flatnonzero(alive & (start_step <= s))
        if act.size == 0:
            if not np.any(alive & (start_step > s)):
                break
            continue
        xa, ya = x[act], y[act]
        drift, off1 = _field(drift_grid, xa, n, L, lim, far_drift)
        diff, _ = _field(diff_grid, xa, n, L, lim, far_diff)
        offgrid += off1
        dw = noise[act, s, :] * sq
        for i in range(d):
            acc = drift[:, i] * dt
            for k in range(m):
                acc = acc + diff[:, i * m + k] * dw[:, k]
            ya[:, i] = ya[:, i] + acc
        if has_map:
            z = xa.copy()
            todo = np.arange(len(act))
            for it in range(max_iter + 1):
                u, off = _field(map_grid, z[todo], n, L, lim, zero_u)
                offgrid += off
                res = _norm((z[todo] + u) - ya[todo])
                conv = res <= tol
                todo_next = todo[~conv]
                if todo_next.size == 0:
                    break
                if it == max_iter:
                    break
                z[todo_next] = ya[todo_next] - u[~conv]
                todo = todo_next
            failed = todo_next
            xa = z
        else:
            failed = np.empty(0, dtype=np.int64)
            xa = ya.copy()
        bad = ~np.all(np.isfinite(xa), axis=1) | ~np.all(np.isfinite(ya), axis=1)
        if failed.size:
            status[act[failed]] = 1
            alive[act[failed]] = False
        if bad.any():
            status[act[bad]] = np.where(status[act[bad]] == 0, 2, status[act[bad]])
            alive[act[bad]] = False
        ok = np.ones(len(act), dtype=bool)
        ok[failed] = False
        ok &= ~bad
        good = act[ok]
        x[good] = xa[ok]
        y[good] = ya[ok]
        r = _norm(xa[ok])
        newly = (r > exit_radius) & (exit_step[good] < 0)
        exit_step[good[newly]] = s + 1
        if (s + 1) % stride == 0:
            slot = (s + 1) // stride
            states_out[good, slot] = x[good]
            if record_y:
                ystates_out[good, slot] = y[good]
        if stop_on_exit:
            alive[good[newly]] = False
    return exit_step, status, x, offgrid
