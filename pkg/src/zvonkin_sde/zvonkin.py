"""The regularising map ``Phi_R(x) = x + u(x)`` and the transformed coefficients.

``u`` solves, componentwise, ``(L - lam) u + b_R . grad u = -b_R``.  Once
``|grad u| <= 1/2`` the map is bi-Lipschitz with constants 1/2 and 2 and
``Y = Phi_R(X)`` solves an SDE with bounded drift ``lam u o Phi^{-1}``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import Grid, GridFunction, gradient, lp_norm, magnitude
from .coefficients import AssumptionParams, TruncatedField
from .errors import ConvergenceError, ParameterError, RegularityError
from .pde_resolvent import (KrylovConstants, ResolventConfig, ResolventOperator, drift_on_grid,
                            lambda_R, lambda_R_H, picard_solve_drifted)

log = logging.getLogger(__name__)

GRAD_FAIL = 0.6
GRAD_WARN = 0.5
INVERSE_MAX_ITER = 60


@dataclass(frozen=True)
class ZvonkinMap:
    u: GridFunction
    grad_u: GridFunction
    lam: float
    R: float
    sup_u: float
    sup_grad_u: float
    iterations: tuple = ()
    residuals: tuple = ()
    warnings: tuple = ()
    lam_floor: float | None = None
    offgrid: dict = field(default_factory=lambda: {"count": 0}, compare=False)

    @property
    def grid(self) -> Grid:
        return self.u.grid

    @property
    def d(self) -> int:
        return self.grid.d

    def _inside(self, pts: np.ndarray) -> np.ndarray:
        g = self.grid
        return np.all(np.abs(pts) <= g.L_box - g.h, axis=1)

    def u_at(self, x) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros_like(pts)
        inside = self._inside(pts)
        if not inside.all():
            self.offgrid["count"] += int((~inside).sum())
        if inside.any():
            out[inside] = self.u(pts[inside]).reshape(-1, self.d)
        return out

    def grad_u_at(self, x) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((len(pts), self.d, self.d))
        inside = self._inside(pts)
        if inside.any():
            out[inside] = self.grad_u(pts[inside]).reshape(-1, self.d, self.d)
        return out

    def manifest(self) -> dict:
        return {
            "lambda": self.lam, "R": self.R, "grid": self.grid.descriptor(),
            "sup_u": self.sup_u, "sup_grad_u": self.sup_grad_u,
            "iterations": list(self.iterations), "residuals": list(self.residuals),
            "warnings": list(self.warnings), "lambda_floor": self.lam_floor,
        }


def forward(zmap: ZvonkinMap, x) -> np.ndarray:
    """``Phi(x) = x + u(x)``; u is taken as zero outside the box interior."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = pts + zmap.u_at(pts)
    return out[0] if single else out


def inverse(zmap: ZvonkinMap, y, tol: float = 1e-10, max_iter: int = INVERSE_MAX_ITER,
            return_iterations: bool = False):
    """Solve ``Phi(z) = y`` by ``z <- y - u(z)`` from ``z = y``."""
    pts = np.asarray(y, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    z = pts.copy()
    iters = np.zeros(len(pts), dtype=int)
    active = np.ones(len(pts), dtype=bool)
    for k in range(max_iter + 1):
        res = np.linalg.norm(z[active] + zmap.u_at(z[active]) - pts[active], axis=1)
        done = res <= tol
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not active.any():
            break
        if k == max_iter:
            raise ConvergenceError(
                f"map inversion did not converge in {max_iter} iterations at y={pts[active][0].tolist()}"
            )
        z[active] = pts[active] - zmap.u_at(z[active])
        iters[active] += 1
    out = z[0] if single else z
    if return_iterations:
        return out, (iters[0] if single else iters)
    return out


@dataclass(frozen=True)
class TransformedField:
    """``b~ = lam u o Phi^{-1}`` and ``sigma~ = ((I + grad u) sigma_R) o Phi^{-1}``.

    ``drift_grid`` and ``diffusion_grid`` hold the same quantities at the
    x-space nodes; the simulator evaluates them at ``X = Phi^{-1}(Y)``.
    """

    source_map: ZvonkinMap
    field: TruncatedField
    drift_grid: np.ndarray
    diffusion_grid: np.ndarray

    @property
    def d(self) -> int:
        return self.field.d

    def drift_t(self, y) -> np.ndarray:
        x = inverse(self.source_map, np.atleast_2d(np.asarray(y, dtype=float)))
        return self.source_map.lam * self.source_map.u_at(x)

    def diffusion_t(self, y) -> np.ndarray:
        x = inverse(self.source_map, np.atleast_2d(np.asarray(y, dtype=float)))
        return self.diffusion_at_x(x)

    def diffusion_at_x(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        jac = np.eye(self.d) + self.source_map.grad_u_at(x)
        return np.einsum("nij,njk->nik", jac, self.field.diffusion_R(x))


def _hash_inputs(drift: np.ndarray, a: np.ndarray, lam: float, grid: Grid, cfg: ResolventConfig) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(drift, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    meta = {"lam": float(lam), "grid": grid.descriptor(), "solver": cfg.solver,
            "tol": cfg.picard_tol, "max_iter": cfg.picard_max_iter}
    h.update(json.dumps(meta, sort_keys=True).encode())
    return h.hexdigest()


def build_map(field: TruncatedField, params: AssumptionParams | None, constants: KrylovConstants | None,
              lam: float, grid: Grid | None = None, cfg: ResolventConfig | None = None,
              cache_dir=None) -> ZvonkinMap:
    """Solve the componentwise drifted problem with source ``-b_R`` and measure the bounds.

    Raises RegularityError when ``sup |grad u| > 0.6``; values in (0.5, 0.6]
    are accepted with a recorded warning.
    """
    params = params or field.params
    if grid is None:
        grid = default_grid(field)
    grid.check_radius(field.R)
    if not lam > 0:
        raise ParameterError("lambda must be positive")
    cfg = cfg or ResolventConfig(lam=lam)
    notes = []
    floor = None
    if constants is not None:
        floor = lambda_R_H(lambda_R(params, constants, field.R), params)
        if lam < floor:
            msg = f"lambda={lam:.4g} below lambda_R_H={floor:.4g}"
            notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)

    drift = drift_on_grid(field, grid)
    a = field.a_R(grid.points())
    key = None
    if cache_dir is not None:
        key = _hash_inputs(drift.values, a, lam, grid, cfg)
        target = Path(cache_dir) / key
        if (target / "manifest.json").exists():
            log.info("loading cached map %s", key)
            return load_map(target)

    op = ResolventOperator(field, grid, lam, drift=drift)
    comps, iters, resid = [], [], []
    for i in range(field.d):
        f = GridFunction(grid, -drift.values[..., i])
        res = picard_solve_drifted(field, lam, f, cfg, operator=op)
        comps.append(res.u.values)
        iters.append(res.iterations)
        resid.append(res.residual)
    u = GridFunction(grid, np.stack(comps, axis=-1))
    grad_u = gradient(u)
    sup_u = float(magnitude(u.values, grid.d).max())
    sup_grad = float(magnitude(grad_u.values, grid.d).max())
    if sup_grad > GRAD_FAIL:
        raise RegularityError(
            f"sup |grad u| = {sup_grad:.3f} exceeds {GRAD_FAIL}; increase lambda (currently {lam:.4g})"
        )
    if sup_grad > GRAD_WARN:
        msg = f"sup |grad u| = {sup_grad:.3f} is above 1/2 (accepted below {GRAD_FAIL})"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    zmap = ZvonkinMap(u, grad_u, float(lam), float(field.R), sup_u, sup_grad, tuple(iters),
                      tuple(resid), tuple(notes), floor)
    if key is not None:
        export_map(zmap, Path(cache_dir) / key)
    return zmap


def default_grid(field: TruncatedField, n: int | None = None, factor: float = 6.0) -> Grid:
    """Periodic box of half-width ``factor * R`` (default 6R)."""
    n = n or {1: 1024, 2: 128, 3: 32}[field.d]
    return Grid(field.d, n, factor * field.R)


def map_residual(zmap: ZvonkinMap, field: TruncatedField) -> list[float]:
    """``||(L - lam) u + b . grad u + b||_2 / ||b||_2`` per component."""
    grid = zmap.grid
    op = ResolventOperator(field, grid, zmap.lam)
    b = op.drift.values
    out = []
    for i in range(field.d):
        ui = zmap.u.values[..., i].ravel()
        r = op.L @ ui - zmap.lam * ui + op.B @ ui + b[..., i].ravel()
        nb = lp_norm(b[..., i], grid, 2)
        out.append(float(np.linalg.norm(r) * math.sqrt(grid.cell_volume) / (nb if nb > 0 else 1.0)))
    return out


def transform_coefficients(zmap: ZvonkinMap, field: TruncatedField) -> TransformedField:
    grid = zmap.grid
    pts = grid.points()
    drift = zmap.lam * zmap.u.values.reshape(grid.size, grid.d)
    jac = np.eye(grid.d) + zmap.grad_u.values.reshape(grid.size, grid.d, grid.d)
    diff = np.einsum("nij,njk->nik", jac, field.diffusion_R(pts))
    return TransformedField(zmap, field, drift, diff)


def identity_map(grid: Grid, R: float) -> ZvonkinMap:
    """The map for a vanishing drift (u = 0)."""
    u = GridFunction(grid, np.zeros(grid.shape + (grid.d,)))
    return ZvonkinMap(u, gradient(u), 1.0, float(R), 0.0, 0.0)


# Export -----------------------------------------------------------------------


def export_map(zmap: ZvonkinMap, directory) -> Path:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    zmap.u.to_binary(path / "u.bin")
    zmap.grad_u.to_binary(path / "grad_u.bin")
    (path / "manifest.json").write_text(json.dumps(zmap.manifest(), indent=2, sort_keys=True) + "\n")
    return path


def load_map(directory) -> ZvonkinMap:
    path = Path(directory)
    meta = json.loads((path / "manifest.json").read_text())
    u = GridFunction.from_binary(path / "u.bin")
    grad_u = GridFunction.from_binary(path / "grad_u.bin")
    return ZvonkinMap(u, grad_u, meta["lambda"], meta["R"], meta["sup_u"], meta["sup_grad_u"],
                      tuple(meta["iterations"]), tuple(meta["residuals"]), tuple(meta["warnings"]),
                      meta.get("lambda_floor"))


# Pipeline ---------------------------------------------------------------------


DEFAULT_LADDER = tuple(2.0**k for k in range(1, 11))


@dataclass(frozen=True)
class PipelineSpec:
    """How to build the map for a given truncation radius.

    ``lam`` is a number or ``"lambda_R_H"``; the latter uses ``constants``
    (calibrated on the same grid when not supplied).
    """

    n: int | None = None
    box_factor: float = 6.0
    lam: float | str = "lambda_R_H"
    constants: KrylovConstants | None = None
    resolvent: ResolventConfig | None = None
    cache_dir: str | None = None
    lambda_ladder: tuple = DEFAULT_LADDER


@dataclass(frozen=True)
class Pipeline:
    field: TruncatedField
    zmap: ZvonkinMap
    transformed: TransformedField
    constants: KrylovConstants | None
    lam: float

    @property
    def R(self) -> float:
        return self.field.R

    @property
    def grid(self) -> Grid:
        return self.zmap.grid


def build_pipeline(base, params: AssumptionParams, R: float, spec: PipelineSpec | None = None) -> Pipeline:
    from .coefficients import truncate
    from .pde_resolvent import calibrate_constants, gaussian_probes

    spec = spec or PipelineSpec()
    tf = truncate(base, params, R)
    grid = default_grid(tf, spec.n, spec.box_factor)
    constants = spec.constants
    if spec.lam == "lambda_R_H":
        if constants is None:
            constants = calibrate_constants(tf, gaussian_probes(grid), spec.lambda_ladder)
        lam = lambda_R_H(lambda_R(params, constants, R), params)
    else:
        lam = float(spec.lam)
    cfg = spec.resolvent or ResolventConfig(lam=lam)
    zmap = build_map(tf, params, constants, lam, grid, cfg, spec.cache_dir)
    return Pipeline(tf, zmap, transform_coefficients(zmap, tf), constants, lam)
