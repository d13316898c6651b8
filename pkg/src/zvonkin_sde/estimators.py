"""Monte Carlo checks of the moment, Krylov, Khasminskii and two-point estimates.

Each check returns a :class:`BoundReport` whose pass rule is exactly
``mean <= bound + 3 * stderr``.  Expectations are accumulated over paths in
index order so reports are deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _fallback
from .analysis import GridFunction
from .errors import DegenerateEstimateError, ParameterError
from .pde_resolvent import KrylovConstants
from .rng import path_normals
from .simulator import PathBatch, SimConfig, TwoPointBatch, shared_noise_bundle, simulate_transformed
from .zvonkin import Pipeline, TransformedField, ZvonkinMap

DEFAULT_AUDIT_CONSTANT = 4.0

ESTIMATORS = (
    "krylov_check",
    "khasminskii_check",
    "sup_moment_check",
    "two_point_moment",
    "doleans_decompose",
    "strong_feller_modulus",
    "injectivity_gap",
    "flow_gradient_moment",
    "holder_time_check",
    "lyapunov_moment_check",
)


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    stderr: float
    n_effective: int
    clipped_count: int = 0

    @classmethod
    def from_samples(cls, samples, clipped: int = 0) -> "MonteCarloEstimate":
        x = np.asarray(samples, dtype=float).ravel()
        n = x.size
        if n == 0:
            raise DegenerateEstimateError("no samples left after exclusions")
        mean = float(np.sum(x) / n)
        se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(mean, se, n, clipped)


@dataclass(frozen=True)
class BoundReport:
    name: str
    empirical: MonteCarloEstimate
    analytic_bound: float
    margin: float
    passed: bool
    constants_used: dict | None = None
    details: dict = field(default_factory=dict)

    @property
    def pass_(self) -> bool:
        return self.passed


def make_report(name: str, est: MonteCarloEstimate, bound: float, constants: KrylovConstants | None = None,
                **details) -> BoundReport:
    passed = bool(est.mean <= bound + 3.0 * est.stderr)
    diff = bound - est.mean
    if est.stderr > 0:
        margin = diff / est.stderr
    else:
        margin = math.inf if diff >= 0 else -math.inf
    snap = constants.snapshot() if constants is not None else None
    return BoundReport(name, est, float(bound), float(margin), passed, snap, details)


def _valid(batch: PathBatch) -> np.ndarray:
    return batch.states[batch.valid]


def _horizon(batch: PathBatch) -> float:
    return float(batch.times[-1])


def _eval_f(f, pts: np.ndarray) -> np.ndarray:
    """Evaluate a callable or a GridFunction (zero outside its box) at ``(N, d)`` points."""
    if isinstance(f, GridFunction):
        out = np.zeros(len(pts))
        inside = np.all(np.abs(pts) < f.grid.L_box, axis=1)
        if inside.any():
            out[inside] = np.asarray(f(pts[inside]), dtype=float).reshape(-1)
        return out
    return np.asarray(f(pts), dtype=float).reshape(-1)


def _time_integral(batch: PathBatch, f, t0: float, t1: float) -> np.ndarray:
    """Per-path trapezoid of ``|f(X_s)|`` over the recorded times in ``[t0, t1]``."""
    states = _valid(batch)
    P, nt, d = states.shape
    sel = np.flatnonzero((batch.times >= t0 - 1e-12) & (batch.times <= t1 + 1e-12))
    if sel.size < 2:
        raise ParameterError("time window contains fewer than two recorded times")
    vals = np.abs(_eval_f(f, states[:, sel].reshape(-1, d))).reshape(P, sel.size)
    dt = np.diff(batch.times[sel])
    return np.sum(0.5 * (vals[:, 1:] + vals[:, :-1]) * dt, axis=1)


# Krylov and Khasminskii --------------------------------------------------------


def krylov_bound(t0: float, t1: float, T: float, p: float, d: int, lambda_R: float,
                 constants: KrylovConstants, f_norm_p: float) -> float:
    """``4 C2 ([T lam]^{d/2p} + [T lam]^{d/2p - 1}) (t1 - t0)^{1 - d/2p} ||f||_p``."""
    kappa = T * lambda_R
    e = d / (2.0 * p)
    return 4.0 * constants.C2 * (kappa**e + kappa ** (e - 1.0)) * (t1 - t0) ** (1.0 - e) * f_norm_p


def _f_norm(f, p: float, f_norm) -> float:
    if f_norm is not None:
        return float(f_norm)
    if isinstance(f, GridFunction):
        from .analysis import lp_norm

        return lp_norm(f.values, f.grid, p)
    raise ParameterError("f_norm must be supplied for callable f")


def krylov_check(batch: PathBatch, f, t0: float, t1: float, p: float, lambda_R: float,
                 constants: KrylovConstants, f_norm: float | None = None) -> BoundReport:
    d = batch.d
    T = _horizon(batch)
    if not 0 <= t0 < t1 <= T + 1e-12:
        raise ParameterError("need 0 <= t0 < t1 <= T")
    if not p > max(d / 2.0, 1.0):
        raise ParameterError("need p > max(d/2, 1)")
    fn = _f_norm(f, p, f_norm)
    est = MonteCarloEstimate.from_samples(_time_integral(batch, f, t0, t1))
    bound = krylov_bound(t0, t1, T, p, d, lambda_R, constants, fn)
    return make_report("krylov_check", est, bound, constants, t0=t0, t1=t1, p=p, lambda_R=lambda_R,
                       f_norm=fn)


def khasminskii_bound(a: float, f_norm_p: float, T: float, lambda_R: float, p: float,
                      constants: KrylovConstants, d: int) -> dict:
    """``e * exp(T / w)`` with partition width ``w`` chosen so each piece contributes ``1 - 1/e``.

    Returns the bound, its logarithm, the width and the partition count ``M = T / w``.
    """
    if not a > 0:
        raise ParameterError("a must be positive")
    if f_norm_p == 0:
        return {"bound": math.e, "log_bound": 1.0, "width": math.inf, "M": 0.0}
    kappa = T * lambda_R
    e = d / (2.0 * p)
    denom = 4.0 * a * constants.C2 * (kappa**e + kappa ** (e - 1.0)) * f_norm_p
    width = ((1.0 - math.exp(-1.0)) / denom) ** (1.0 / (1.0 - e))
    M = T / width
    log_bound = 1.0 + M
    bound = math.exp(log_bound) if log_bound < 700 else math.inf
    return {"bound": bound, "log_bound": log_bound, "width": width, "M": M}


def khasminskii_check(batch: PathBatch, f, a: float, p: float, lambda_R: float,
                      constants: KrylovConstants, f_norm: float | None = None) -> BoundReport:
    """``E exp(a int_0^T |f(X_s)| ds)`` aggregated in log space."""
    d = batch.d
    T = _horizon(batch)
    fn = _f_norm(f, p, f_norm)
    expo = a * _time_integral(batch, f, 0.0, T)
    n = expo.size
    top = float(np.max(expo))
    w = np.exp(expo - top)
    log_mean = float(logsumexp(expo) - math.log(n))
    se_scaled = float(np.std(w, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    scale = math.exp(top) if top < 700 else math.inf
    mean = math.exp(log_mean) if log_mean < 700 else math.inf
    est = MonteCarloEstimate(mean, se_scaled * scale, n, 0)
    kb = khasminskii_bound(a, fn, T, lambda_R, p, constants, d)
    k = max(1, n // 100)
    share = float(np.sum(np.sort(w)[-k:]) / np.sum(w))
    heavy = share > 0.5
    if heavy:
        warnings.warn(f"heavy tail: top 1% of samples carry {share:.0%} of the mean", RuntimeWarning,
                      stacklevel=2)
    rep = make_report("khasminskii_check", est, kb["bound"], constants)
    rep.details.update(a=a, p=p, lambda_R=lambda_R, f_norm=fn, log_mean=log_mean,
                       log_bound=kb["log_bound"], partitions=kb["M"], width=kb["width"],
                       top_share=share, heavy_tail=heavy)
    return rep


# Moment bounds -------------------------------------------------------------------


def _start(batch: PathBatch) -> np.ndarray:
    return batch.states[0, 0]


def calibrate_audit_constant(brownian_batch: PathBatch, p: float, lambda_R: float,
                             safety: float = DEFAULT_AUDIT_CONSTANT) -> float:
    """Audit constant from a Brownian run: ``safety * max(1, E sup|X|^p / (1 + |x|^p + lam^p))``."""
    states = _valid(brownian_batch)
    x = np.linalg.norm(_start(brownian_batch))
    sup = np.max(np.linalg.norm(states, axis=2), axis=1) ** p
    ratio = float(np.mean(sup)) / (1.0 + x**p + lambda_R**p)
    return safety * max(1.0, ratio)


def sup_moment_check(batch: PathBatch, p: float, lambda_R: float,
                     C_tilde: float = DEFAULT_AUDIT_CONSTANT) -> BoundReport:
    if p < 2:
        raise ParameterError("p must be >= 2")
    states = _valid(batch)
    sup = np.max(np.linalg.norm(states, axis=2), axis=1) ** p
    x = float(np.linalg.norm(_start(batch)))
    bound = C_tilde * (1.0 + x**p + lambda_R**p)
    est = MonteCarloEstimate.from_samples(sup)
    return make_report("sup_moment_check", est, bound, None, p=p, lambda_R=lambda_R, C_tilde=C_tilde)


def lyapunov_moment_check(batch: PathBatch, alpha: float, lambda_R: float,
                          C_tilde: float = DEFAULT_AUDIT_CONSTANT, t: float | None = None) -> BoundReport:
    """``E (1 + |X_t|^2)^alpha`` against ``C exp(C lam) (1 + |x|^2)^alpha``."""
    t = _horizon(batch) if t is None else t
    xt = batch.at(t)
    vals = (1.0 + np.sum(xt**2, axis=1)) ** alpha
    x2 = float(np.sum(_start(batch) ** 2))
    log_bound = math.log(C_tilde) + C_tilde * lambda_R + alpha * math.log1p(x2)
    bound = math.exp(log_bound) if log_bound < 700 else math.inf
    est = MonteCarloEstimate.from_samples(vals)
    return make_report("lyapunov_moment_check", est, bound, None, alpha=alpha, t=t, lambda_R=lambda_R,
                       C_tilde=C_tilde, log_bound=log_bound)


def holder_time_check(batch: PathBatch, p: float = 2.0, pairs=None) -> list[dict]:
    """``E|X_t - X_s|^p / |t - s|^{p/2}`` over a ladder of (s, t) pairs.

    The default ladder ends at T with lags ``T / 2^k``, k = 0..5, on recorded times.
    """
    if p < 2:
        raise ParameterError("p must be >= 2")
    states = _valid(batch)
    times = batch.times
    T = times[-1]
    if pairs is None:
        pairs = []
        for k in range(6):
            lag = T / 2**k
            s = T - lag
            if lag >= times[1] - times[0] - 1e-12:
                pairs.append((s, T))
    rows = []
    for s, t in pairs:
        i = int(np.argmin(np.abs(times - s)))
        j = int(np.argmin(np.abs(times - t)))
        if i == j:
            continue
        inc = np.linalg.norm(states[:, j] - states[:, i], axis=1) ** p
        lag = abs(times[j] - times[i])
        est = MonteCarloEstimate.from_samples(inc / lag ** (p / 2.0))
        rows.append({"s": float(times[i]), "t": float(times[j]), "ratio": est.mean, "stderr": est.stderr,
                     "n": est.n_effective})
    return rows


def ladder_stable(rows, key: str = "ratio", k: float = 3.0) -> bool:
    """Every pair of rows agrees within ``k`` combined standard errors."""
    for a in rows:
        for b in rows:
            if abs(a[key] - b[key]) > k * math.hypot(a["stderr"], b["stderr"]):
                return False
    return True


# Two-point quantities ---------------------------------------------------------


def _gaps(tp: TwoPointBatch, t: float | None) -> tuple[np.ndarray, float]:
    bx, by = tp.paths_x, tp.paths_y
    t = _horizon(bx) if t is None else t
    k = int(np.argmin(np.abs(bx.times - t)))
    ok = bx.valid & by.valid
    gap = np.linalg.norm(bx.states[ok, k] - by.states[ok, k], axis=1)
    g0 = float(np.linalg.norm(bx.states[0, 0] - by.states[0, 0]))
    return gap, g0


def two_point_moment(tp: TwoPointBatch, alpha: float, eps_floor: float | None = None,
                     t: float | None = None) -> MonteCarloEstimate:
    """``E|X_t(x) - X_t(y)|^alpha``; gaps below ``eps_floor`` are excluded when alpha < 0."""
    gap, g0 = _gaps(tp, t)
    if eps_floor is None:
        eps_floor = 1e-8 * g0
    if alpha < 0:
        if not eps_floor > 0:
            raise ParameterError("eps_floor must be positive for negative alpha")
        keep = gap >= eps_floor
    else:
        keep = np.ones(gap.size, bool)
    clipped = int((~keep).sum())
    if not keep.any():
        raise DegenerateEstimateError("every pair fell below the gap floor")
    return MonteCarloEstimate.from_samples(gap[keep] ** alpha, clipped)


def two_point_ratio(tp: TwoPointBatch, alpha: float, eps_floor: float | None = None,
                    t: float | None = None) -> MonteCarloEstimate:
    """``two_point_moment / |x - y|^alpha``."""
    est = two_point_moment(tp, alpha, eps_floor, t)
    _, g0 = _gaps(tp, t)
    s = g0**alpha
    return MonteCarloEstimate(est.mean / s, est.stderr / s, est.n_effective, est.clipped_count)


@dataclass(frozen=True)
class TwoPointDecomposition:
    times: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Z: np.ndarray
    reconstruction_error: float
    path_errors: np.ndarray
    martingale: MonteCarloEstimate
    truncated_paths: int
    excluded_steps: int


def _coefficients_at(tf: TransformedField, x: np.ndarray):
    """``b~`` and ``sigma~`` at x-space points with the simulator's interpolation and far field."""
    g = tf.source_map.grid
    d = g.d
    lim = g.L_box - g.h
    b, _ = _fallback._field(tf.drift_grid.reshape(g.size, d), x, g.n, g.L_box, lim, np.zeros(d))
    far = tf.field.far_diffusion().ravel()
    s, _ = _fallback._field(tf.diffusion_grid.reshape(g.size, 2 * d * d), x, g.n, g.L_box, lim, far)
    return b, s.reshape(-1, d, 2 * d)


def doleans_decompose(tp: TwoPointBatch, zmap: ZvonkinMap, tf: TransformedField, alpha: float,
                      eps_floor: float | None = None) -> TwoPointDecomposition:
    """Discrete A, B series of ``|Z|^alpha = |Z_0|^alpha exp(int B dW - 1/2 int |B|^2 + int A)``.

    Needs a two-point batch recorded at every step with Y states.  The
    reconstruction error is the RMS over paths of the per-path maximum over
    time of the relative discrepancy.
    """
    if alpha == 0:
        raise ParameterError("alpha must be nonzero")
    bx, by = tp.paths_x, tp.paths_y
    cfg = bx.cfg
    if cfg is None or cfg.record_stride != 1 or bx.ystates is None:
        raise ParameterError("doleans_decompose needs record_stride=1 and recorded Y states")
    ok = bx.valid & by.valid
    P = int(ok.sum())
    S = cfg.n_steps
    d = bx.d
    dt = cfg.step
    dW = path_normals(bx.seed, bx.path_ids[ok], S, 2 * d) * math.sqrt(dt)
    Yx, Yy = bx.ystates[ok], by.ystates[ok]
    Xx, Xy = bx.states[ok], by.states[ok]
    Z = Yx - Yy
    z0 = np.linalg.norm(Z[:, 0], axis=1)
    if eps_floor is None:
        eps_floor = 1e-8 * float(np.min(z0))
    A = np.zeros((P, S))
    B = np.zeros((P, S, 2 * d))
    log_rec = np.zeros((P, S + 1))
    log_m1 = np.zeros(P)
    alive = np.ones(P, bool)
    excluded = 0
    path_err = np.zeros(P)
    for k in range(S):
        zk = Z[:, k]
        nz = np.linalg.norm(zk, axis=1)
        alive &= ~(nz < eps_floor)
        excluded += int((~alive).sum())
        bxk, sxk = _coefficients_at(tf, Xx[:, k])
        byk, syk = _coefficients_at(tf, Xy[:, k])
        db = bxk - byk
        ds = sxk - syk
        nz2 = np.where(alive, nz**2, 1.0)
        sTz = np.einsum("nij,ni->nj", ds, zk)
        Bk = alpha * sTz / nz2[:, None]
        Ak = (alpha * np.sum(zk * db, axis=1) / nz2
              + 0.5 * alpha * np.sum(ds**2, axis=(1, 2)) / nz2
              + 0.5 * alpha * (alpha - 2.0) * np.sum(sTz**2, axis=1) / nz2**2)
        Bk[~alive] = 0.0
        Ak[~alive] = 0.0
        A[:, k] = Ak
        B[:, k] = Bk
        inc_m = np.sum(Bk * dW[:, k], axis=1) - 0.5 * np.sum(Bk**2, axis=1) * dt
        log_m1 += inc_m
        log_rec[:, k + 1] = log_rec[:, k] + inc_m + Ak * dt
        nz_next = np.linalg.norm(Z[:, k + 1], axis=1)
        rel = np.abs((nz_next / z0) ** alpha - np.exp(log_rec[:, k + 1]))
        path_err = np.where(alive, np.maximum(path_err, rel), path_err)
    truncated = int((~alive).sum())
    err = float(np.sqrt(np.mean(path_err**2)))
    mart = MonteCarloEstimate.from_samples(np.exp(log_m1))
    return TwoPointDecomposition(bx.times, A, B, Z, err, path_err, mart, truncated, excluded)


def injectivity_gap(batches: list[PathBatch], t: float | None = None,
                    eps_floor: float | None = None) -> dict:
    """Pairwise gaps at time t across shared-noise batches started on a grid of points."""
    starts = np.array([b.states[0, 0] for b in batches])
    K = len(starts)
    if K < 2:
        raise ParameterError("need at least two start points")
    sg = np.linalg.norm(starts[:, None] - starts[None], axis=2)
    iu = np.triu_indices(K, 1)
    min_start = float(sg[iu].min())
    if min_start == 0:
        raise ParameterError("start grid must be pairwise distinct")
    eps_floor = 1e-8 * min_start if eps_floor is None else eps_floor
    t = _horizon(batches[0]) if t is None else t
    k = int(np.argmin(np.abs(batches[0].times - t)))
    ok = np.all([b.valid for b in batches], axis=0)
    X = np.stack([b.states[ok, k] for b in batches])  # (K, P, d)
    gaps = np.linalg.norm(X[iu[0]] - X[iu[1]], axis=2)  # (pairs, P)
    per_path_min = gaps.min(axis=0)
    clipped = int((gaps < eps_floor).sum())
    keep = gaps[gaps >= eps_floor]
    Rfun = 1.0 / keep
    return {
        "min_gap": float(per_path_min.min()),
        "min_start_gap": min_start,
        "ratio_min_gap": float(per_path_min.min() / min_start),
        "clipped": clipped,
        "n_pairs": int(gaps.size),
        "R_mean": float(Rfun.mean()),
        "R_max": float(Rfun.max()),
        "R_quantiles": [float(q) for q in np.quantile(Rfun, [0.5, 0.9, 0.99])],
        "R_finite": bool(np.all(np.isfinite(Rfun))),
        "pass": bool(clipped == 0 and per_path_min.min() > eps_floor),
    }


def flow_gradient_moment(pipeline: Pipeline, x, e, h_ladder, p: float, cfg: SimConfig) -> list[dict]:
    """``E sup_t |X_t(x + h e) - X_t(x)|^p / h^p`` for each h, with shared noise per pair."""
    x = np.asarray(x, dtype=float).reshape(-1)
    e = np.asarray(e, dtype=float).reshape(-1)
    e = e / np.linalg.norm(e)
    rows = []
    for h in h_ladder:
        b0, b1 = shared_noise_bundle(pipeline.transformed, pipeline.zmap, [x, x + h * e], cfg)
        ok = b0.valid & b1.valid
        diff = np.linalg.norm(b1.states[ok] - b0.states[ok], axis=2).max(axis=1)
        est = MonteCarloEstimate.from_samples((diff / h) ** p)
        rows.append({"h": float(h), "ratio": est.mean, "stderr": est.stderr, "n": est.n_effective})
    return rows


def strong_feller_modulus(pipeline: Pipeline, f, t: float, x_grid, cfg: SimConfig) -> dict:
    """``|P_t f(x_i) - P_t f(x_0)|`` against ``|x_i - x_0|`` with independent noise per start."""
    xs = np.asarray(x_grid, dtype=float)
    if xs.ndim == 1:
        xs = xs.reshape(-1, pipeline.field.d)
    values = []
    for i, x in enumerate(xs):
        b = simulate_transformed(pipeline.transformed, pipeline.zmap, x, cfg, path_offset=i * cfg.n_paths)
        values.append(MonteCarloEstimate.from_samples(_eval_f(f, b.at(t))))
    rows = []
    for i in range(1, len(xs)):
        rows.append({
            "dist": float(np.linalg.norm(xs[i] - xs[0])),
            "diff": abs(values[i].mean - values[0].mean),
            "signed_diff": values[i].mean - values[0].mean,
            "stderr": math.hypot(values[i].stderr, values[0].stderr),
        })
    return {"starts": xs, "values": values, "rows": rows}


# Pathwise Ito check --------------------------------------------------------------


def ito_residual(batch: PathBatch, field, f, grad_f, hess_f) -> float:
    """RMS over paths of ``f(X_T) - f(x) - int (L f + b . grad f) ds - sum grad f . sigma dW``.

    Left-point sums on the recorded steps (record_stride must be 1); the noise
    is regenerated from the batch's streams.
    """
    cfg = batch.cfg
    if cfg is None or cfg.record_stride != 1:
        raise ParameterError("ito_residual needs record_stride=1")
    ok = batch.valid
    X = batch.states[ok]
    P, nt, d = X.shape
    dt = cfg.step
    dW = path_normals(batch.seed, batch.path_ids[ok], cfg.n_steps, 2 * d) * math.sqrt(dt)
    acc = np.zeros(P)
    for k in range(nt - 1):
        x = X[:, k]
        a = field.a_R(x)
        g = grad_f(x)
        Lf = 0.5 * np.einsum("nij,nij->n", a, hess_f(x)) + np.sum(field.drift_R(x) * g, axis=1)
        mart = np.einsum("ni,nik,nk->n", g, field.diffusion_R(x), dW[:, k])
        acc += Lf * dt + mart
    res = f(X[:, -1]) - f(X[:, 0]) - acc
    return float(np.sqrt(np.mean(res**2)))


# Output ---------------------------------------------------------------------------

REPORT_COLUMNS = ["name", "mean", "stderr", "n_effective", "clipped_count", "analytic_bound", "margin",
                  "pass", "C1", "C2", "provenance"]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_reports_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            c = r.constants_used or {}
            w.writerow([_fmt(x) for x in (
                r.name, r.empirical.mean, r.empirical.stderr, r.empirical.n_effective,
                r.empirical.clipped_count, r.analytic_bound, r.margin, r.passed,
                c.get("C1"), c.get("C2"), c.get("provenance"))])


def summary_lines(reports) -> list[str]:
    lines = []
    for r in reports:
        lines.append(f"{r.name}: empirical={r.empirical.mean:.6g} +/- {r.empirical.stderr:.3g} "
                     f"bound={r.analytic_bound:.6g} margin={r.margin:.3g} "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return lines
