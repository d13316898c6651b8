"""Coefficient fields, cut-off functions and the truncated coefficients.

The truncation keeps the drift on ``B(R)`` and blends the diffusion into a
constant elliptic far field::

    b_R(x)     = b(x) 1{|x| <= R}
    sigma_R(x) = [rho_R(x) sigma(x), h_R(x) delta^{-1/2} I]      (d x 2d)

so that ``a_R = sigma_R sigma_R^T`` stays uniformly elliptic.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import AssumptionViolation, ParameterError, ResolutionError

QUAD_REL_TOL = 1e-3
QUAD_MAX_CELLS = 2**24


@dataclass(frozen=True)
class AssumptionParams:
    d: int
    p1: float
    beta: float
    beta_tilde: float
    delta: float
    varpi: float
    T: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ParameterError(f"d must be 1, 2 or 3, got {self.d}")
        if not self.p1 > self.d:
            raise ParameterError("p1 must exceed d")
        if not (self.beta >= 0 and self.beta_tilde > 0):
            raise ParameterError("beta must be >= 0 and beta_tilde positive")
        if not 0 < self.delta < 1:
            raise ParameterError("delta must lie in (0, 1)")
        if not 0 < self.varpi < 1:
            raise ParameterError("varpi must lie in (0, 1)")
        if not self.T > 0:
            raise ParameterError("T must be positive")


@dataclass(frozen=True)
class CoefficientField:
    """Drift ``(N, d) -> (N, d)`` and diffusion ``(N, d) -> (N, d, d)``, vectorised.

    ``grad_diffusion`` (optional) maps to ``(N, d, d, d)`` with entry
    ``[n, i, k, j] = d sigma_ik / d x_j``.  ``support_radius=None`` means the
    drift is not compactly supported.
    """

    d: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    grad_diffusion: Callable[[np.ndarray], np.ndarray] | None = None
    support_radius: float | None = None
    key: str | None = None
    smooth: bool = True

    def b(self, x) -> np.ndarray:
        pts = _as_points(x, self.d)
        out = np.asarray(self.drift(pts), dtype=float).reshape(pts.shape)
        if self.support_radius is not None:
            out[np.linalg.norm(pts, axis=1) > self.support_radius] = 0.0
        return out

    def sigma(self, x) -> np.ndarray:
        pts = _as_points(x, self.d)
        return np.asarray(self.diffusion(pts), dtype=float).reshape(len(pts), self.d, self.d)


def _as_points(x, d: int) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(1, d) if pts.size == d else pts.reshape(-1, 1)
    if pts.shape[1] != d:
        raise ParameterError(f"expected points of dimension {d}, got shape {pts.shape}")
    return pts


def _radius(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        return np.atleast_1d(np.linalg.norm(x)) if x.ndim == 1 else np.atleast_1d(abs(x))
    return np.linalg.norm(x, axis=-1)


def _check_R(R: float) -> None:
    if not R >= 1:
        raise ParameterError(f"truncation radius must be >= 1, got {R}")


def cutoff_h(R: float, x) -> np.ndarray:
    """Inner cut-off: 0 on ``B(R)``, quadratic spline up to 1 at ``|x| = 2R``."""
    _check_R(R)
    r = _radius(x)
    out = np.ones_like(r)
    out[r <= R] = 0.0
    m1 = (r > R) & (r <= 1.5 * R)
    out[m1] = 2.0 / R**2 * (r[m1] - R) ** 2
    m2 = (r > 1.5 * R) & (r <= 2 * R)
    out[m2] = 1.0 - 2.0 / R**2 * (r[m2] - 2 * R) ** 2
    return out


def cutoff_rho(R: float, x) -> np.ndarray:
    """Outer cut-off: 1 on ``B(2R)``, mirrored spline down to 0 at ``|x| = 3R``."""
    _check_R(R)
    r = _radius(x)
    out = np.zeros_like(r)
    out[r <= 2 * R] = 1.0
    m1 = (r > 2 * R) & (r <= 2.5 * R)
    out[m1] = 1.0 - 2.0 / R**2 * (r[m1] - 2 * R) ** 2
    m2 = (r > 2.5 * R) & (r <= 3 * R)
    out[m2] = 2.0 / R**2 * (r[m2] - 3 * R) ** 2
    return out


def cutoff_gradients(R: float, x) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``h_R`` and ``rho_R`` at points ``(N, d)``."""
    _check_R(R)
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.linalg.norm(pts, axis=1)
    dh = np.zeros_like(r)
    m1 = (r > R) & (r <= 1.5 * R)
    dh[m1] = 4.0 / R**2 * (r[m1] - R)
    m2 = (r > 1.5 * R) & (r <= 2 * R)
    dh[m2] = -4.0 / R**2 * (r[m2] - 2 * R)
    drho = np.zeros_like(r)
    m3 = (r > 2 * R) & (r <= 2.5 * R)
    drho[m3] = -4.0 / R**2 * (r[m3] - 2 * R)
    m4 = (r > 2.5 * R) & (r <= 3 * R)
    drho[m4] = 4.0 / R**2 * (r[m4] - 3 * R)
    unit = np.divide(pts, r[:, None], out=np.zeros_like(pts), where=r[:, None] > 0)
    return dh[:, None] * unit, drho[:, None] * unit


def growth_envelope(R: float, params: AssumptionParams, kind: str = "drift") -> float:
    """``I_b(R) = (log R + 1)^e`` or ``I_sigma(R) = (log(R/3) + 1)^e``, ``e = (p1-d)^2 / (2 p1^2)``."""
    e = (params.p1 - params.d) ** 2 / (2.0 * params.p1**2)
    if kind == "drift":
        if R < 1:
            raise ParameterError("drift envelope needs R >= 1")
        return (math.log(R) + 1.0) ** e
    if kind == "diffusion":
        if R < 3:
            raise ParameterError("diffusion envelope needs R >= 3")
        return (math.log(R / 3.0) + 1.0) ** e
    raise ParameterError(f"unknown envelope kind {kind!r}")


# Truncation -----------------------------------------------------------------


@dataclass(frozen=True)
class TruncatedField:
    base: CoefficientField
    params: AssumptionParams
    R: float

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def noise_dim(self) -> int:
        return 2 * self.base.d

    def drift_R(self, x) -> np.ndarray:
        pts = _as_points(x, self.d)
        out = self.base.b(pts)
        out[np.linalg.norm(pts, axis=1) > self.R] = 0.0
        return out

    def diffusion_R(self, x) -> np.ndarray:
        """``(N, d, 2d)`` array ``[rho_R sigma, h_R delta^{-1/2} I]``."""
        pts = _as_points(x, self.d)
        rho = cutoff_rho(self.R, pts)
        hh = cutoff_h(self.R, pts)
        out = np.zeros((len(pts), self.d, 2 * self.d))
        need = rho > 0
        if need.any():
            out[need, :, : self.d] = rho[need, None, None] * self.base.sigma(pts[need])
        out[:, :, self.d :] = (hh / math.sqrt(self.params.delta))[:, None, None] * np.eye(self.d)
        return out

    def a_R(self, x) -> np.ndarray:
        s = self.diffusion_R(x)
        return np.einsum("nik,njk->nij", s, s)

    def far_diffusion(self) -> np.ndarray:
        out = np.zeros((self.d, 2 * self.d))
        out[:, self.d :] = np.eye(self.d) / math.sqrt(self.params.delta)
        return out

    def ellipticity_constants(self) -> dict:
        """Lower/upper ellipticity and Hoelder constants of ``sigma_R``."""
        d, delta = self.d, self.params.delta
        holder = 12 * d * delta**-0.5 * d**0.5 + delta**-0.5 + 12 * delta**-0.5 * d**0.5
        return {"lower": 0.5 * delta, "upper": 2.0 / delta, "holder": holder}

    def key(self) -> str | None:
        if self.base.key is None:
            return None
        payload = {"field": self.base.key, "R": self.R, "params": self.params.__dict__}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def audit_points(d: int, radius: float, n: int = 2048, seed: int = 20240611) -> np.ndarray:
    """Deterministic audit sample: uniform points in ``B(radius)`` plus the origin."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / d)
    return np.vstack([np.zeros((1, d)), dirs * r[:, None]])


def truncate(field: CoefficientField, params: AssumptionParams, R: float,
             points: np.ndarray | None = None) -> TruncatedField:
    """Build the truncated pair and audit ellipticity at sample points."""
    _check_R(R)
    if field.d != params.d:
        raise ParameterError(f"field dimension {field.d} != params.d {params.d}")
    pts = audit_points(field.d, 4 * R) if points is None else _as_points(points, field.d)
    inner = pts[np.linalg.norm(pts, axis=1) <= 3 * R]
    if len(inner):
        s = field.sigma(inner)
        eig = np.linalg.eigvalsh(np.einsum("nik,njk->nij", s, s))
        tol = 1e-12
        bad = (eig[:, 0] < params.delta * (1 - tol)) | (eig[:, -1] > (1 + tol) / params.delta)
        if bad.any():
            i = int(np.argmax(bad))
            raise AssumptionViolation(
                f"diffusion violates ellipticity with delta={params.delta} at x={inner[i].tolist()} "
                f"(eigenvalues of sigma sigma^T: {eig[i].tolist()})",
                point=inner[i],
            )
    tf = TruncatedField(field, params, float(R))
    a = tf.a_R(pts)
    eig = np.linalg.eigvalsh(a)
    bad = (eig[:, 0] < 0.5 * params.delta * (1 - 1e-12)) | (eig[:, -1] > 2 / params.delta * (1 + 1e-12))
    if bad.any():
        i = int(np.argmax(bad))
        raise AssumptionViolation(f"truncated diffusion not elliptic at x={pts[i].tolist()}", point=pts[i])
    return tf


# Assumption audit -------------------------------------------------------------


def ball_lp_norm(func, d: int, R: float, p: float, rel_tol: float = QUAD_REL_TOL,
                 max_cells: int = QUAD_MAX_CELLS) -> dict:
    """``(int_{B(R)} |func|^p)^{1/p}`` by product midpoint quadrature with doubling.

    ``func`` maps ``(N, d)`` points to nonnegative magnitudes ``(N,)``.
    Stops when the relative change drops below ``rel_tol``.  When the
    increments shrink geometrically but slowly, the limit is extrapolated;
    when they do not shrink the integral is flagged divergent.
    """
    m = max(16, 2 * int(math.ceil(4 * R)))
    history: list[float] = []
    status = "divergent"
    while m**d <= max_cells:
        hcell = 2.0 * R / m
        ax = -R + (np.arange(m) + 0.5) * hcell
        total = 0.0
        # chunk along the first axis to bound memory
        rest = np.meshgrid(*([ax] * (d - 1)), indexing="ij") if d > 1 else []
        rest = np.stack([r.ravel() for r in rest], axis=-1) if d > 1 else np.zeros((1, 0))
        step = max(1, 2**20 // max(1, len(rest)))
        for start in range(0, m, step):
            first = ax[start:start + step]
            pts = np.concatenate(
                [np.repeat(first, len(rest))[:, None], np.tile(rest, (len(first), 1))], axis=1
            )
            inside = np.linalg.norm(pts, axis=1) <= R
            vals = np.asarray(func(pts[inside]), dtype=float)
            if not np.all(np.isfinite(vals)):
                bad = pts[inside][~np.isfinite(vals)][0]
                raise ResolutionError(
                    f"non-finite integrand at {bad.tolist()} (cell size {hcell:.3g}); "
                    "refine or shift the quadrature grid"
                )
            total += float(np.sum(vals**p)) * hcell**d
        history.append(total)
        if len(history) >= 2:
            prev = history[-2]
            change = abs(total - prev) / max(abs(total), np.finfo(float).tiny)
            if total == 0.0 or change < rel_tol:
                status = "converged"
                break
            if len(history) >= 4:
                incs = np.diff(history[-4:])
                ratios = incs[1:] / incs[:-1]
                if np.all(ratios > 0) and np.all(ratios < 0.99) and abs(ratios[1] - ratios[0]) < 0.01:
                    r = ratios[-1]
                    total = total + incs[-1] * r / (1 - r)
                    status = "extrapolated"
                    break
                if np.all(ratios >= 1.0):
                    status = "divergent"
                    break
        m *= 2
    value = history[-1] if status == "divergent" else total
    return {
        "norm": value ** (1.0 / p) if status != "divergent" else math.inf,
        "status": status,
        "cells_per_axis": m,
        "history": history,
    }


def audit_assumptions(field: CoefficientField, params: AssumptionParams, R_list) -> list[dict]:
    """Per-R table of ball ``L^{p1}`` norms against ``beta I(R) + beta_tilde``.

    Rows for the diffusion gradient are produced only when ``grad_diffusion``
    is available and ``R >= 3`` (the envelope's domain).
    """
    rows = []
    p1 = params.p1
    for R in R_list:
        q = ball_lp_norm(lambda x: np.linalg.norm(field.b(x), axis=1), field.d, R, p1)
        bound = params.beta * growth_envelope(R, params, "drift") + params.beta_tilde
        rows.append({
            "kind": "drift", "R": float(R), "norm": float(q["norm"]), "bound": bound,
            "status": q["status"], "pass": bool(q["status"] != "divergent" and q["norm"] <= bound),
        })
        if field.grad_diffusion is not None and R >= 3:
            def grad_mag(x):
                g = np.asarray(field.grad_diffusion(x), dtype=float)
                return np.sqrt(np.sum(g.reshape(len(x), -1) ** 2, axis=1))
            q = ball_lp_norm(grad_mag, field.d, R, p1)
            bound = params.beta * growth_envelope(R, params, "diffusion") + params.beta_tilde
            rows.append({
                "kind": "diffusion", "R": float(R), "norm": float(q["norm"]), "bound": bound,
                "status": q["status"], "pass": bool(q["status"] != "divergent" and q["norm"] <= bound),
            })
    return rows


# Presets ----------------------------------------------------------------------


def _key(name: str, **kw) -> str:
    return json.dumps({"preset": name, **kw}, sort_keys=True)


def _eye_field(d: int, scale: float = 1.0):
    def sig(x):
        return np.broadcast_to(scale * np.eye(d), (len(x), d, d)).copy()

    def grad(x):
        return np.zeros((len(x), d, d, d))

    return sig, grad


def zero_field(d: int = 1, sigma_scale: float = 1.0) -> CoefficientField:
    """No drift, ``sigma = sigma_scale * I`` (the Brownian / additive case)."""
    sig, grad = _eye_field(d, sigma_scale)
    return CoefficientField(d, lambda x: np.zeros_like(x), sig, grad, support_radius=0.0,
                            key=_key("zero", d=d, sigma_scale=sigma_scale))


def constant_field(d: int = 1, drift=None, sigma=None) -> CoefficientField:
    b0 = np.zeros(d) if drift is None else np.asarray(drift, dtype=float).reshape(d)
    s0 = np.eye(d) if sigma is None else np.asarray(sigma, dtype=float).reshape(d, d)
    return CoefficientField(
        d,
        lambda x: np.broadcast_to(b0, x.shape).copy(),
        lambda x: np.broadcast_to(s0, (len(x), d, d)).copy(),
        lambda x: np.zeros((len(x), d, d, d)),
        key=_key("constant", d=d, drift=b0.tolist(), sigma=s0.tolist()),
    )


def ou_field(d: int = 1, theta: float = 1.0, sigma_scale: float = 1.0) -> CoefficientField:
    """Ornstein-Uhlenbeck drift ``b(x) = -theta x``."""
    sig, grad = _eye_field(d, sigma_scale)
    return CoefficientField(d, lambda x: -theta * x, sig, grad,
                            key=_key("ou", d=d, theta=theta, sigma_scale=sigma_scale))


def singular_power_field(d: int = 1, c: float = 1.0, gamma: float = 0.3,
                         support: float = 1.0) -> CoefficientField:
    """``b(x) = c x / |x|^{1+gamma}`` on ``|x| <= support`` (zero outside)."""
    if not 0 < gamma < 1:
        raise ParameterError("gamma must lie in (0, 1)")

    def drift(x):
        r = np.linalg.norm(x, axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            return c * x / r ** (1.0 + gamma)

    sig, grad = _eye_field(d)
    return CoefficientField(d, drift, sig, grad, support_radius=support, smooth=False,
                            key=_key("singular_power", d=d, c=c, gamma=gamma, support=support))


def smooth_bump_field(d: int = 1, amplitude: float = 1.0, width: float = 0.5,
                      sigma_modulation: float = 0.2, sigma_width: float = 1.0) -> CoefficientField:
    """Smooth drift ``b(x) = A x exp(-|x|^2/(2w^2))`` and ``sigma = (1 + m exp(-|x|^2/(2s^2))) I``."""

    def drift(x):
        r2 = np.sum(x**2, axis=1, keepdims=True)
        return amplitude * x * np.exp(-r2 / (2 * width**2))

    def scale(x):
        r2 = np.sum(x**2, axis=1)
        return 1.0 + sigma_modulation * np.exp(-r2 / (2 * sigma_width**2))

    def sig(x):
        return scale(x)[:, None, None] * np.eye(d)

    def grad(x):
        r2 = np.sum(x**2, axis=1)
        ds = -sigma_modulation * np.exp(-r2 / (2 * sigma_width**2))[:, None] * x / sigma_width**2
        return np.einsum("ik,nj->nikj", np.eye(d), ds)

    return CoefficientField(
        d, drift, sig, grad,
        key=_key("smooth_bump", d=d, amplitude=amplitude, width=width,
                 sigma_modulation=sigma_modulation, sigma_width=sigma_width),
    )


def custom_grid_field(path, d: int) -> CoefficientField:
    """Coefficients sampled on a tensor mesh (CSV: x1..xd, b1..bd, s11..sdd).

    Linear interpolation inside the mesh; outside it the drift is zero and
    the diffusion is clamped to the nearest mesh value.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError:
        data = np.array([[float(v) for v in r] for r in rows[1:]])
    if data.shape[1] != d + d + d * d:
        raise ParameterError(f"{path}: expected {2 * d + d * d} columns, got {data.shape[1]}")
    axes = [np.unique(data[:, k]) for k in range(d)]
    shape = tuple(len(a) for a in axes)
    if np.prod(shape) != len(data):
        raise ParameterError(f"{path}: mesh is not a full tensor grid")
    order = np.lexsort(data[:, :d].T[::-1])
    data = data[order]
    b_vals = data[:, d:2 * d].reshape(shape + (d,))
    s_vals = data[:, 2 * d:].reshape(shape + (d, d))
    b_int = RegularGridInterpolator(axes, b_vals, bounds_error=False, fill_value=0.0)
    s_int = RegularGridInterpolator(axes, s_vals, bounds_error=False, fill_value=None)
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    digest = hashlib.sha256(data.tobytes()).hexdigest()
    return CoefficientField(
        d,
        lambda x: b_int(x),
        lambda x: s_int(np.clip(x, lo, hi)),
        support_radius=float(np.max(np.abs(np.concatenate([lo, hi])))) * math.sqrt(d),
        key=_key("custom-grid", d=d, sha256=digest),
        smooth=False,
    )


PRESETS: dict[str, Callable[..., CoefficientField]] = {
    "zero": zero_field,
    "brownian": zero_field,
    "additive": zero_field,
    "constant": constant_field,
    "ou": ou_field,
    "singular_power": singular_power_field,
    "smooth_bump": smooth_bump_field,
    "custom-grid": custom_grid_field,
}


def make_preset(name: str, d: int, **kwargs) -> CoefficientField:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown coefficient preset {name!r}") from None
    return factory(d=d, **kwargs)
