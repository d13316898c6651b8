"""Resolvent and drifted elliptic problems on the periodic grid.

Solves ``(L - lam) u = f`` with ``L u = 1/2 sum_ij a_ij d_i d_j u`` and the
drifted problem ``(L - lam) u + b . grad u = f`` by Picard iteration

    u_n = (L - lam)^{-1} (f - b . grad u_{n-1}),   u_0 = 0.

Two backends for the resolvent: a direct sparse stencil solve and the
Laplace transform of the heat semigroup, ``u = -int_0^inf e^{-lam t} T_t f dt``.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .analysis import Grid, GridFunction, bessel_norm, gradient, hessian, lp_norm, sample, \
    sample_cell_average, sobolev_norm
from .coefficients import AssumptionParams, TruncatedField, growth_envelope
from .errors import ParameterError, SolverError, StabilityError

log = logging.getLogger(__name__)

DIRECT_MAX_UNKNOWNS = 2**18
LAPLACE_TAIL = 1e-13


@dataclass(frozen=True)
class ResolventConfig:
    lam: float = 1.0
    solver: str = "direct-sparse"
    picard_tol: float = 1e-8
    picard_max_iter: int = 200
    semigroup_dt: float | None = None
    semigroup_t_max: float | None = None
    semigroup_steps_per_level: int = 16

    def __post_init__(self):
        if not self.lam > 0:
            raise ParameterError("lambda must be positive")
        if self.solver not in ("direct-sparse", "semigroup-integral"):
            raise ParameterError(f"unknown solver {self.solver!r}")
        if not self.picard_tol > 0:
            raise ParameterError("picard_tol must be positive")
        if self.picard_max_iter < 1:
            raise ParameterError("picard_max_iter must be >= 1")
        if self.semigroup_dt is not None and not self.semigroup_dt > 0:
            raise ParameterError("semigroup_dt must be positive")
        if self.semigroup_t_max is not None and self.lam * self.semigroup_t_max < 30:
            raise ParameterError("lambda * semigroup_t_max must be >= 30")


@dataclass(frozen=True)
class KrylovConstants:
    C1: float
    C2: float
    provenance: str = "user-supplied"
    alpha: float = 1.0
    p: float = 2.0
    p_prime: float = math.inf

    def __post_init__(self):
        if not (self.C1 > 0 and self.C2 > 0):
            raise ParameterError("C1 and C2 must be positive")
        if self.provenance not in ("calibrated", "user-supplied"):
            raise ParameterError(f"unknown provenance {self.provenance!r}")

    def snapshot(self) -> dict:
        return {"C1": self.C1, "C2": self.C2, "provenance": self.provenance,
                "alpha": self.alpha, "p": self.p, "p_prime": self.p_prime}


@dataclass(frozen=True)
class DriftedSolveResult:
    u: GridFunction
    grad_u: GridFunction
    iterations: int
    residual: float
    norms: dict
    history: list = field(default_factory=list)

    @property
    def contraction(self) -> list[float]:
        h = self.history
        return [h[i + 1] / h[i] for i in range(len(h) - 1) if h[i] > 0]


# Stencil assembly -------------------------------------------------------------


def _neighbour(idx: np.ndarray, offsets: dict[int, int]) -> np.ndarray:
    out = idx
    for axis, off in offsets.items():
        out = np.roll(out, -off, axis=axis)
    return out.ravel()


def generator_matrix(a: np.ndarray, grid: Grid) -> sp.csr_matrix:
    """Sparse matrix of ``1/2 sum a_ij d_i d_j`` with ``a`` sampled at nodes, shape ``(N, d, d)``."""
    d, h2 = grid.d, grid.h**2
    N = grid.size
    idx = np.arange(N).reshape(grid.shape)
    rows, cols, vals = [], [], []
    centre = np.arange(N)
    for i in range(d):
        c = 0.5 * a[:, i, i] / h2
        for off, w in ((1, 1.0), (-1, 1.0)):
            rows.append(centre); cols.append(_neighbour(idx, {i: off})); vals.append(w * c)
        rows.append(centre); cols.append(centre); vals.append(-2.0 * c)
        for j in range(i + 1, d):
            # symmetric a: 1/2 (a_ij + a_ji) d_i d_j = a_ij d_i d_j
            c = a[:, i, j] / (4.0 * h2)
            for oi, oj, w in ((1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)):
                rows.append(centre); cols.append(_neighbour(idx, {i: oi, j: oj})); vals.append(w * c)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )


def gradient_matrices(grid: Grid) -> list[sp.csr_matrix]:
    N = grid.size
    idx = np.arange(N).reshape(grid.shape)
    centre = np.arange(N)
    out = []
    for i in range(grid.d):
        rows = np.concatenate([centre, centre])
        cols = np.concatenate([_neighbour(idx, {i: 1}), _neighbour(idx, {i: -1})])
        vals = np.concatenate([np.full(N, 0.5 / grid.h), np.full(N, -0.5 / grid.h)])
        out.append(sp.csr_matrix((vals, (rows, cols)), shape=(N, N)))
    return out


def drift_on_grid(field: TruncatedField, grid: Grid) -> GridFunction:
    """``b_R`` at the nodes; non-smooth fields use cell averages so point singularities stay finite."""
    if field.base.smooth:
        return sample(grid, field.drift_R, (field.d,))
    return sample_cell_average(grid, field.drift_R, (field.d,))


def _check_grid(field: TruncatedField, grid: Grid) -> None:
    if grid.d != field.d:
        raise ParameterError(f"grid dimension {grid.d} != field dimension {field.d}")


class _Factor:
    """LU for moderate systems, ILU-preconditioned GMRES beyond ``DIRECT_MAX_UNKNOWNS``."""

    def __init__(self, A: sp.spmatrix, tol: float = 1e-12):
        self.A = A.tocsc()
        self.tol = tol
        if A.shape[0] <= DIRECT_MAX_UNKNOWNS:
            self.lu = spla.splu(self.A)
            self.M = None
        else:
            self.lu = None
            ilu = spla.spilu(self.A, drop_tol=1e-5, fill_factor=10)
            self.M = spla.LinearOperator(A.shape, ilu.solve)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.lu is not None:
            x = self.lu.solve(rhs)
        else:
            x, info = spla.gmres(self.A, rhs, M=self.M, rtol=self.tol, atol=0.0, restart=50, maxiter=200)
            if info != 0:
                res = np.linalg.norm(self.A @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
                raise SolverError(f"GMRES did not converge (info={info})", residual=res)
        if not np.all(np.isfinite(x)):
            raise SolverError("linear solve produced non-finite values")
        return x


class ResolventOperator:
    """Assembled ``L``, ``b . grad`` and the factorised ``L - lam`` on one grid."""

    def __init__(self, field: TruncatedField, grid: Grid, lam: float, drift: GridFunction | None = None):
        _check_grid(field, grid)
        if not lam > 0:
            raise ParameterError("lambda must be positive")
        self.field, self.grid, self.lam = field, grid, float(lam)
        a = field.a_R(grid.points())
        self.a = a
        self.L = generator_matrix(a, grid)
        self.drift = drift_on_grid(field, grid) if drift is None else drift
        b = self.drift.values.reshape(grid.size, grid.d)
        self.has_drift = bool(np.any(b != 0.0))
        G = gradient_matrices(grid)
        self.B = sum(sp.diags(b[:, i]) @ G[i] for i in range(grid.d)).tocsr()
        self._factor = None

    @property
    def factor(self) -> _Factor:
        if self._factor is None:
            self._factor = _Factor(self.L - self.lam * sp.identity(self.grid.size, format="csr"))
        return self._factor

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.factor.solve(np.asarray(rhs, dtype=float).ravel()).reshape(self.grid.shape)


# Operations -------------------------------------------------------------------


def apply_generator(field: TruncatedField, u: GridFunction) -> GridFunction:
    """``1/2 sum a_ij d_i d_j u`` with centered second differences."""
    g = u.grid
    _check_grid(field, g)
    if u.value_shape:
        raise ParameterError("apply_generator expects a scalar grid function")
    a = field.a_R(g.points()).reshape(g.shape + (g.d, g.d))
    H = hessian(u).values
    return u.with_values(0.5 * np.einsum("...ij,...ij->...", a, H))


def resolvent_residual(field: TruncatedField, lam: float, u: GridFunction, f: GridFunction) -> float:
    """``||(L - lam) u - f||_2 / ||f||_2`` (absolute when f vanishes)."""
    r = apply_generator(field, u).values - lam * u.values - f.values
    nf = lp_norm(f.values, f.grid, 2)
    return lp_norm(r, f.grid, 2) / (nf if nf > 0 else 1.0)


def _sdirk2_stepper(L: sp.csr_matrix, dt: float):
    g = 1.0 - 1.0 / math.sqrt(2.0)
    fac = _Factor(sp.identity(L.shape[0], format="csr") - g * dt * L)

    def step(v):
        k1 = fac.solve(L @ v)
        k2 = fac.solve(L @ (v + (1.0 - g) * dt * k1))
        return v + dt * ((1.0 - g) * k1 + g * k2)

    return step


def _check_stable(v: np.ndarray, scale: float) -> None:
    if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > 1e6 * max(scale, 1e-300):
        raise StabilityError("semigroup time stepping blew up; reduce the time step")


def heat_semigroup(field: TruncatedField, f: GridFunction, t: float, dt: float) -> GridFunction:
    """``T_t f``: solve ``dv/dt = L v``, ``v(0) = f`` with L-stable SDIRK2."""
    if t < 0:
        raise ParameterError("t must be nonnegative")
    if not dt > 0:
        raise ParameterError("dt must be positive")
    if t == 0:
        return f
    g = f.grid
    _check_grid(field, g)
    L = generator_matrix(field.a_R(g.points()), g)
    n_steps = max(1, int(math.ceil(t / dt - 1e-12)))
    h = t / n_steps
    step = _sdirk2_stepper(L, h)
    scale = float(np.max(np.abs(f.values))) if f.values.size else 0.0
    out = []
    for comp in f.components():
        v = comp.ravel().copy()
        for _ in range(n_steps):
            v = step(v)
            _check_stable(v, scale)
        out.append(v.reshape(g.shape))
    return f.with_values(np.moveaxis(np.stack(out), 0, -1).reshape(f.values.shape))


def _laplace_quadrature(L: sp.csr_matrix, f: np.ndarray, lam: float, dt0: float, m: int,
                        t_max: float) -> np.ndarray:
    """Trapezoid rule for ``int_0^t_max e^{-lam t} v(t) dt`` on a geometric time ladder.

    Level k takes m steps of size ``dt0 * 2**k``.
    """
    scale = float(np.max(np.abs(f))) if f.size else 0.0
    v = f.copy()
    t = 0.0
    acc = np.zeros_like(f)
    dt = dt0
    while t < t_max and math.exp(-lam * t) >= LAPLACE_TAIL:
        step = _sdirk2_stepper(L, dt)
        for _ in range(m):
            v_new = step(v)
            _check_stable(v_new, scale)
            acc += 0.5 * dt * (math.exp(-lam * t) * v + math.exp(-lam * (t + dt)) * v_new)
            v = v_new
            t += dt
        dt *= 2.0
    return acc


def solve_resolvent(field: TruncatedField, lam: float, f: GridFunction,
                    cfg: ResolventConfig | None = None,
                    operator: ResolventOperator | None = None) -> GridFunction:
    """Solve ``(L - lam) u = f`` (componentwise for vector f)."""
    cfg = cfg or ResolventConfig(lam=lam)
    if not lam > 0:
        raise ParameterError("lambda must be positive")
    g = f.grid
    _check_grid(field, g)
    comps = f.components()
    out = []
    if cfg.solver == "direct-sparse":
        op = operator if operator is not None else ResolventOperator(field, g, lam)
        for c in comps:
            u = op.solve(c)
            res = np.linalg.norm((op.L @ u.ravel() - lam * u.ravel()) - c.ravel())
            nrm = np.linalg.norm(c)
            if res > 1e-6 * max(nrm, 1e-300) + 1e-300 and nrm > 0:
                raise SolverError("direct solve residual too large", residual=res / nrm)
            out.append(u)
    else:
        L = operator.L if operator is not None else generator_matrix(field.a_R(g.points()), g)
        t_max = cfg.semigroup_t_max if cfg.semigroup_t_max is not None else 32.0 / lam
        if lam * t_max < 30:
            raise ParameterError("lambda * semigroup_t_max must be >= 30")
        dt0 = cfg.semigroup_dt if cfg.semigroup_dt is not None else 0.02 / lam
        m = cfg.semigroup_steps_per_level
        for c in comps:
            flat = c.ravel()
            coarse = _laplace_quadrature(L, flat, lam, dt0, m, t_max)
            fine = _laplace_quadrature(L, flat, lam, dt0 / 2.0, 2 * m, t_max)
            # both rules are second order in the step; Richardson removes the leading term
            out.append(-(fine + (fine - coarse) / 3.0).reshape(g.shape))
    return f.with_values(np.moveaxis(np.stack(out), 0, -1).reshape(f.values.shape))


def _w1inf(values: np.ndarray, grid: Grid) -> float:
    gf = GridFunction(grid, values)
    return max(float(np.max(np.abs(values))), float(np.max(np.abs(gradient(gf).values))))


def norm_table(u: GridFunction, lam: float, alphas=(0.0, 1.0, 2.0), p_primes=(2.0, math.inf)) -> dict:
    return {(a, pp): bessel_norm(u, a, pp) for a in alphas for pp in p_primes}


def picard_solve_drifted(field: TruncatedField, lam: float, f: GridFunction,
                         cfg: ResolventConfig | None = None,
                         constants: KrylovConstants | None = None,
                         operator: ResolventOperator | None = None,
                         R: float | None = None) -> DriftedSolveResult:
    """Fixed point of ``u = (L - lam)^{-1}(f - b_R . grad u)`` for scalar f.

    Stops when ``max(|u_n - u_{n-1}|, |grad(u_n - u_{n-1})|) <= picard_tol``.
    """
    cfg = cfg or ResolventConfig(lam=lam)
    g = f.grid
    if f.value_shape:
        raise ParameterError("picard_solve_drifted expects a scalar right-hand side")
    if constants is not None:
        floor = lambda_R(field.params, constants, R if R is not None else field.R)
        if lam < floor:
            warnings.warn(f"lambda={lam:.4g} is below lambda_R={floor:.4g}; Picard may not contract",
                          RuntimeWarning, stacklevel=2)
    op = operator if operator is not None else ResolventOperator(field, g, lam)
    if op.lam != lam:
        raise ParameterError("operator was assembled for a different lambda")
    rhs0 = f.values.ravel()

    def resolve(rhs):
        if cfg.solver == "direct-sparse":
            return op.solve(rhs)
        return solve_resolvent(field, lam, g_fun(rhs), cfg, op).values

    def g_fun(flat):
        return GridFunction(g, flat.reshape(g.shape))

    u = resolve(rhs0)
    history = []
    it = 1
    if op.has_drift:
        while True:
            if it >= cfg.picard_max_iter:
                raise SolverError(
                    f"Picard iteration did not converge in {cfg.picard_max_iter} iterations "
                    f"(lambda={lam:.4g} may be too small)",
                    residual=history[-1] if history else None, history=history,
                )
            u_new = resolve(rhs0 - op.B @ u.ravel())
            it += 1
            diff = _w1inf(u_new - u, g)
            history.append(diff)
            u = u_new
            if not np.isfinite(diff):
                raise SolverError("Picard iteration diverged", residual=diff, history=history)
            if diff <= cfg.picard_tol:
                break
    residual = history[-1] if history else 0.0
    uf = GridFunction(g, u)
    return DriftedSolveResult(uf, gradient(uf), it, residual, norm_table(uf, lam), history)


# lambda constants ---------------------------------------------------------------


def lambda_R(params: AssumptionParams, constants: KrylovConstants, R: float) -> float:
    """``(4 C2^2 (beta I_b(R) + beta_tilde)^2)^{p1/(p1-d)}``."""
    env = params.beta * growth_envelope(R, params, "drift") + params.beta_tilde
    return (4.0 * constants.C2**2 * env**2) ** (params.p1 / (params.p1 - params.d))


def lambda_R_H(lam_R: float, params: AssumptionParams) -> float:
    """``gamma * lam_R`` with ``gamma = 2^{2 p1/(p1-d)}``, i.e. ``gamma^{d/(2p1) - 1/2} = 1/2``."""
    if not lam_R > 0:
        raise ParameterError("lambda_R must be positive")
    return 2.0 ** (2.0 * params.p1 / (params.p1 - params.d)) * lam_R


# Scaling law and calibration ---------------------------------------------------


def _u_norm(u: GridFunction, alpha: float, p_prime: float) -> float:
    if alpha == 1.0 and math.isinf(p_prime):
        return sobolev_norm(u, 1, math.inf)
    return bessel_norm(u, alpha, p_prime)


def verify_scaling(field: TruncatedField, f: GridFunction, lambda_ladder, alpha: float, p: float,
                   p_prime: float) -> dict:
    """Fit the slope of ``log ||u||_{alpha,p'}`` against ``log lam``."""
    d = field.d
    lams = [float(x) for x in lambda_ladder]
    if len(lams) < 3:
        raise ParameterError("scaling fit needs at least 3 lambda values")
    if not d / p < 2.0 - alpha + d / p_prime:
        raise ParameterError("need d/p < 2 - alpha + d/p'")
    theory = (alpha - 2.0 + d / p - d / p_prime) / 2.0
    f_norm = lp_norm(f.values, f.grid, p)
    if f_norm == 0.0:
        return {"slope": None, "theoretical": theory, "skipped": True, "lambdas": lams,
                "norms": [0.0] * len(lams), "f_norm": 0.0}
    norms = []
    for lam in lams:
        u = solve_resolvent(field, lam, f)
        norms.append(_u_norm(u, alpha, p_prime))
    slope = float(np.polyfit(np.log(lams), np.log(norms), 1)[0])
    return {"slope": slope, "theoretical": theory, "skipped": False, "lambdas": lams,
            "norms": norms, "f_norm": f_norm,
            "relative_error": abs(slope - theory) / abs(theory) if theory else abs(slope)}


def gaussian_probes(grid: Grid, widths=(0.0625, 0.125, 0.25, 0.5, 1.0)) -> list[GridFunction]:
    r2 = grid.radius() ** 2
    return [GridFunction(grid, np.exp(-r2 / (2 * w**2))) for w in widths]


def calibrate_constants(field: TruncatedField, probes, lambda_ladder, p: float | None = None,
                        alpha: float = 1.0, p_prime: float = math.inf,
                        safety: float = 2.0) -> KrylovConstants:
    """Measure ``C1 = sup ||u||_{2,p}/||f||_p`` and the lambda-compensated ``C2``, times ``safety``.

    ``C2`` uses ``||u||_{alpha,p'} <= C2 lam^{(alpha-2+d/p-d/p')/2} ||f||_p``; the
    defaults (alpha=1, p'=inf, p=p1) are the combination used by the Picard
    contraction and the Zvonkin gradient bound.
    """
    probes = list(probes)
    if not probes:
        raise ParameterError("probe set must be nonempty")
    p = field.params.p1 if p is None else p
    d = field.d
    expo = (alpha - 2.0 + d / p - d / p_prime) / 2.0
    c1 = c2 = 0.0
    used = 0
    for f in probes:
        f_norm = lp_norm(f.values, f.grid, p)
        if f_norm == 0.0:
            continue
        used += 1
        for lam in lambda_ladder:
            op = ResolventOperator(field, f.grid, lam, drift=GridFunction(f.grid, np.zeros(f.grid.shape + (d,))))
            u = GridFunction(f.grid, op.solve(f.values))
            c1 = max(c1, sobolev_norm(u, 2, p) / f_norm)
            c2 = max(c2, _u_norm(u, alpha, p_prime) / (lam**expo * f_norm))
    if used == 0:
        raise ParameterError("degenerate probe set: every probe vanishes")
    return KrylovConstants(safety * c1, safety * c2, "calibrated", alpha, p, p_prime)


def write_norm_table(rows, path) -> None:
    """CSV with columns ``alpha, p_prime, lambda, norm``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "p_prime", "lambda", "norm"])
        for r in rows:
            w.writerow([repr(float(r["alpha"])), "inf" if math.isinf(r["p_prime"]) else repr(float(r["p_prime"])),
                        repr(float(r["lambda"])), repr(float(r["norm"]))])
