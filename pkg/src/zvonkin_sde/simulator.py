"""Euler-Maruyama path generation for the truncated and transformed SDEs.

All simulations use 2d-dimensional noise (the width of ``sigma_R``), drawn
from per-path counter-based streams, so transformed and direct runs and the
two members of a two-point pair can share increments exactly.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .analysis import Grid, mollify, sample
from .coefficients import AssumptionParams, CoefficientField, TruncatedField
from .errors import ParameterError
from .pde_resolvent import drift_on_grid
from .rng import path_normals
from .zvonkin import PipelineSpec, TransformedField, ZvonkinMap, build_pipeline, default_grid

log = logging.getLogger(__name__)

STATUS_OK, STATUS_INVERSE_FAILED, STATUS_NONFINITE = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    T: float
    dt: float
    n_paths: int
    seed: int = 0
    scheme: str = "euler-maruyama"
    record_stride: int = 1
    block_size: int = 4096
    threads: int = 1
    inverse_tol: float = 1e-10
    inverse_max_iter: int = 60
    backend: str | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ParameterError("dt must be positive")
        if not self.T > 0 or self.dt > self.T * (1 + 1e-12):
            raise ParameterError("need 0 < dt <= T")
        if self.n_paths < 1:
            raise ParameterError("n_paths must be >= 1")
        if self.scheme != "euler-maruyama":
            raise ParameterError(f"unsupported scheme {self.scheme!r}")
        if self.record_stride < 1:
            raise ParameterError("record_stride must be >= 1")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))

    @property
    def step(self) -> float:
        """Step actually used: ``T / n_steps``."""
        return self.T / self.n_steps

    @property
    def n_records(self) -> int:
        return self.n_steps // self.record_stride + 1

    def times(self) -> np.ndarray:
        return np.arange(self.n_records) * self.record_stride * self.step


@dataclass
class PathBatch:
    times: np.ndarray
    states: np.ndarray
    exit_times: np.ndarray
    path_ids: np.ndarray
    seed: int
    R: float
    status: np.ndarray
    segments: np.ndarray
    ystates: np.ndarray | None = None
    flags: dict = field(default_factory=dict)
    offgrid: int = 0
    backend: str = ""
    cfg: SimConfig | None = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    @property
    def valid(self) -> np.ndarray:
        return self.status == STATUS_OK

    @property
    def n_invalid(self) -> int:
        return int((~self.valid).sum())

    def at(self, t: float) -> np.ndarray:
        """States at the recorded time nearest to t, valid paths only."""
        k = int(np.argmin(np.abs(self.times - t)))
        return self.states[self.valid, k]

    def noise_digest(self, segment: int = 0) -> str:
        """Hash of the increment streams consumed by segment ``segment`` of every path."""
        n_steps = (len(self.times) - 1) * (self.cfg.record_stride if self.cfg else 1)
        z = path_normals(self.seed, self.path_ids, n_steps, 2 * self.d, segment)
        return hashlib.sha256(z.tobytes()).hexdigest()


@dataclass
class TwoPointBatch:
    paths_x: PathBatch
    paths_y: PathBatch
    x: np.ndarray
    y: np.ndarray


# Driver -----------------------------------------------------------------------


@dataclass(frozen=True)
class _Coefficients:
    grid: Grid
    drift: np.ndarray
    diffusion: np.ndarray
    map_u: np.ndarray | None
    far_drift: np.ndarray
    far_diffusion: np.ndarray


def _as_starts(x0, n_paths: int, d: int) -> np.ndarray:
    x = np.asarray(x0, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim == 1:
        if x.size != d:
            raise ParameterError(f"start point must have dimension {d}")
        return np.broadcast_to(x, (n_paths, d)).copy()
    if x.shape != (n_paths, d):
        raise ParameterError(f"per-path starts must have shape {(n_paths, d)}")
    return x.copy()


def _run(coef: _Coefficients, starts: np.ndarray, path_ids: np.ndarray, cfg: SimConfig, *,
         segment: int = 0, start_step: np.ndarray | None = None, states: np.ndarray | None = None,
         ystates: np.ndarray | None = None, record_y: bool = False, exit_radius: float = math.inf,
         stop_on_exit: bool = False):
    kernel = kernels.get_kernel(cfg.backend)
    backend = cfg.backend or kernels.BACKEND
    P, d = starts.shape
    m = 2 * d
    S = cfg.n_steps
    nrec = cfg.n_records
    if states is None:
        states = np.full((P, nrec, d), np.nan)
    if record_y and ystates is None:
        ystates = np.full((P, nrec, d), np.nan)
    if start_step is None:
        start_step = np.zeros(P, dtype=np.int64)
    exit_step = np.full(P, -1, dtype=np.int64)
    status = np.zeros(P, dtype=np.int8)
    x_final = starts.copy()
    G = coef.grid.size
    drift = np.ascontiguousarray(coef.drift.reshape(G, d))
    diff = np.ascontiguousarray(coef.diffusion.reshape(G, d * m))
    has_map = coef.map_u is not None
    map_u = np.ascontiguousarray(coef.map_u.reshape(G, d)) if has_map else np.zeros((1, d))
    empty_y = np.zeros((0, 0, 0))
    far_drift = np.ascontiguousarray(coef.far_drift, dtype=float)
    far_diff = np.ascontiguousarray(coef.far_diffusion.reshape(-1), dtype=float)
    blocks = [np.arange(i, min(i + cfg.block_size, P)) for i in range(0, P, cfg.block_size)]

    def work(idx):
        noise = path_normals(cfg.seed, path_ids[idx], S, m, segment)
        st = np.ascontiguousarray(states[idx])
        ys = np.ascontiguousarray(ystates[idx]) if record_y else empty_y
        out = kernel(np.ascontiguousarray(starts[idx]), noise, np.ascontiguousarray(start_step[idx]),
                     cfg.step, drift, diff, map_u, has_map, coef.grid.n, coef.grid.L_box,
                     far_drift, far_diff, st, ys, cfg.record_stride, cfg.inverse_tol,
                     cfg.inverse_max_iter, exit_radius, stop_on_exit)
        return idx, st, ys, out

    offgrid = 0
    if cfg.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(b) for b in blocks]
    for idx, st, ys, (ex, stt, xf, off) in results:
        states[idx] = st
        if record_y:
            ystates[idx] = ys
        exit_step[idx] = ex
        status[idx] = stt
        x_final[idx] = xf
        offgrid += int(off)
    if offgrid:
        log.info("%d off-grid coefficient evaluations (far-field constants used)", offgrid)
    return states, ystates, exit_step, status, x_final, offgrid, backend


def _transformed_coefficients(tf: TransformedField, zmap: ZvonkinMap) -> _Coefficients:
    g = zmap.grid
    d = g.d
    return _Coefficients(g, tf.drift_grid, tf.diffusion_grid, zmap.u.values, np.zeros(d),
                         tf.field.far_diffusion())


def _direct_coefficients(field: TruncatedField, mollify_n: int, grid: Grid) -> _Coefficients:
    d = field.d
    b = drift_on_grid(field, grid)
    s = sample(grid, field.diffusion_R, (d, 2 * d))
    if mollify_n:
        b = mollify(b, mollify_n)
        s = mollify(s, mollify_n)
    return _Coefficients(grid, b.values, s.values, None, np.zeros(d), field.far_diffusion())


def _batch(cfg: SimConfig, states, ystates, status, path_ids, R, segments, offgrid, backend,
           flags=None) -> PathBatch:
    times = cfg.times()
    batch = PathBatch(times, states, np.full(len(states), math.inf), path_ids, cfg.seed, float(R),
                      status, segments, ystates, flags or {}, offgrid, backend, cfg)
    batch.exit_times = stopping_time(batch, R)
    n_bad = batch.n_invalid
    if n_bad:
        warnings.warn(f"{n_bad} paths flagged invalid and excluded from estimators", RuntimeWarning,
                      stacklevel=3)
    return batch


def simulate_transformed(tf: TransformedField, zmap: ZvonkinMap, x0, cfg: SimConfig, *,
                         record_y: bool = False, path_offset: int = 0) -> PathBatch:
    """Euler-Maruyama for ``Y = Phi(X)`` with 2d-dimensional noise; records ``X = Phi^{-1}(Y)``."""
    d = tf.d
    starts = _as_starts(x0, cfg.n_paths, d)
    ids = np.arange(cfg.n_paths, dtype=np.int64) + path_offset
    coef = _transformed_coefficients(tf, zmap)
    states, ys, _, status, _, off, backend = _run(coef, starts, ids, cfg, record_y=record_y)
    return _batch(cfg, states, ys, status, ids, tf.field.R, np.zeros(cfg.n_paths, np.int64), off, backend)


def simulate_direct(field: TruncatedField, mollify_n: int, x0, cfg: SimConfig, *,
                    grid: Grid | None = None, path_offset: int = 0) -> PathBatch:
    """Euler-Maruyama directly on (mollified) ``b_R`` and ``sigma_R``; ``mollify_n=0`` skips smoothing."""
    grid = grid or default_grid(field)
    grid.check_radius(field.R)
    starts = _as_starts(x0, cfg.n_paths, field.d)
    ids = np.arange(cfg.n_paths, dtype=np.int64) + path_offset
    coef = _direct_coefficients(field, mollify_n, grid)
    states, ys, _, status, _, off, backend = _run(coef, starts, ids, cfg)
    return _batch(cfg, states, ys, status, ids, field.R, np.zeros(cfg.n_paths, np.int64), off, backend)


def two_point(tf: TransformedField, zmap: ZvonkinMap, x, y, cfg: SimConfig, *,
              record_y: bool = True, path_offset: int = 0) -> TwoPointBatch:
    """Two solutions from x and y driven by identical increments (same stream per path index)."""
    d = tf.d
    xs = _as_starts(x, cfg.n_paths, d)
    ys_ = _as_starts(y, cfg.n_paths, d)
    if np.any(np.all(xs == ys_, axis=1)):
        raise ParameterError("two-point starts must differ")
    ids = np.arange(cfg.n_paths, dtype=np.int64) + path_offset
    coef = _transformed_coefficients(tf, zmap)
    starts = np.concatenate([xs, ys_])
    both = np.concatenate([ids, ids])
    states, yst, _, status, _, off, backend = _run(coef, starts, both, cfg, record_y=record_y)
    P = cfg.n_paths
    seg = np.zeros(P, np.int64)
    bx = _batch(cfg, states[:P], None if yst is None else yst[:P], status[:P], ids, tf.field.R, seg,
                off, backend)
    by = _batch(cfg, states[P:], None if yst is None else yst[P:], status[P:], ids, tf.field.R, seg,
                off, backend)
    return TwoPointBatch(bx, by, xs[0] if np.all(xs == xs[0]) else xs, ys_[0] if np.all(ys_ == ys_[0]) else ys_)


def shared_noise_bundle(tf: TransformedField, zmap: ZvonkinMap, starts, cfg: SimConfig, *,
                        record_y: bool = False, path_offset: int = 0) -> list[PathBatch]:
    """One batch per start point; path ``i`` of every batch uses the same stream."""
    d = tf.d
    starts = np.asarray(starts, dtype=float).reshape(-1, d)
    K, P = len(starts), cfg.n_paths
    ids = np.arange(P, dtype=np.int64) + path_offset
    coef = _transformed_coefficients(tf, zmap)
    all_starts = np.repeat(starts, P, axis=0)
    states, yst, _, status, _, off, backend = _run(coef, all_starts, np.tile(ids, K), cfg,
                                                   record_y=record_y)
    seg = np.zeros(P, np.int64)
    out = []
    for k in range(K):
        sl = slice(k * P, (k + 1) * P)
        out.append(_batch(cfg, states[sl], None if yst is None else yst[sl], status[sl], ids,
                          tf.field.R, seg, off, backend))
    return out


def stopping_time(batch: PathBatch, R: float) -> np.ndarray:
    """First recorded time with ``|X| > R`` (``inf`` if none)."""
    if R > batch.R * (1 + 1e-12):
        raise ParameterError(f"R={R} exceeds the batch truncation radius {batch.R}")
    r = np.linalg.norm(batch.states, axis=2)
    hit = np.nan_to_num(r, nan=-1.0) > R
    first = np.argmax(hit, axis=1)
    out = np.where(hit.any(axis=1), batch.times[first], math.inf)
    return out


def patch_global(field: CoefficientField, params: AssumptionParams, x0, R_ladder, cfg: SimConfig,
                 spec: PipelineSpec | None = None, pipelines: list | None = None) -> PathBatch:
    """Simulate up to ``tau_{R_1}``, continue at ``R_2`` from the exit state with a fresh segment, etc.

    Paths leaving the last ball before T are flagged ``ladder-exhausted``
    (they are continued under the last truncation).
    """
    R_ladder = [float(r) for r in R_ladder]
    if any(b <= a for a, b in zip(R_ladder, R_ladder[1:])):
        raise ParameterError("R ladder must be strictly increasing")
    starts = _as_starts(x0, cfg.n_paths, field.d)
    if np.any(np.linalg.norm(starts, axis=1) >= R_ladder[0]):
        raise ParameterError("first ladder radius must exceed |x0|")
    if pipelines is None:
        pipelines = [build_pipeline(field, params, R, spec) for R in R_ladder]
    P = cfg.n_paths
    ids = np.arange(P, dtype=np.int64)
    states = np.full((P, cfg.n_records, field.d), np.nan)
    status = np.zeros(P, np.int8)
    segments = np.zeros(P, np.int64)
    rung_exit = np.full((P, len(R_ladder)), -1, dtype=np.int64)
    active = np.ones(P, bool)
    start_step = np.zeros(P, np.int64)
    x_cur = starts
    offgrid = 0
    backend = ""
    for k, pipe in enumerate(pipelines):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        last = k == len(pipelines) - 1
        coef = _transformed_coefficients(pipe.transformed, pipe.zmap)
        st, _, ex, stt, xf, off, backend = _run(
            coef, x_cur[idx], ids[idx], cfg, segment=k, start_step=start_step[idx],
            states=np.ascontiguousarray(states[idx]), exit_radius=pipe.R, stop_on_exit=not last,
        )
        offgrid += off
        states[idx] = st
        status[idx] = stt
        segments[idx] = k
        rung_exit[idx, k] = ex
        exited = (ex >= 0) & (ex < cfg.n_steps) & (stt == STATUS_OK)
        x_next = x_cur.copy()
        x_next[idx] = xf
        x_cur = x_next
        start_step = start_step.copy()
        start_step[idx[exited]] = ex[exited]
        new_active = np.zeros(P, bool)
        if not last:
            new_active[idx[exited]] = True
        active = new_active
    exhausted = (rung_exit[:, -1] >= 0) & (rung_exit[:, -1] <= cfg.n_steps)
    frac = float(exhausted.mean())
    if frac > 0.5:
        warnings.warn(f"{frac:.0%} of paths exhausted the R ladder; growth assumptions may fail numerically",
                      RuntimeWarning, stacklevel=2)
    flags = {"ladder-exhausted": exhausted, "rung_exit_step": rung_exit, "R_ladder": R_ladder}
    batch = _batch(cfg, states, None, status, ids, R_ladder[-1], segments, offgrid, backend, flags)
    return batch


# Export -----------------------------------------------------------------------


def write_paths_csv(batch: PathBatch, path, every: int = 1, max_paths: int | None = None) -> None:
    """Columns ``path_id, t, x1..xd, exited`` (exited: recorded ``|X| > R`` at or before t)."""
    d = batch.d
    n = batch.n_paths if max_paths is None else min(max_paths, batch.n_paths)
    with open(path, "w") as fh:
        fh.write(",".join(["path_id", "t"] + [f"x{k + 1}" for k in range(d)] + ["exited"]) + "\n")
        for p in range(n):
            for k in range(0, len(batch.times), every):
                t = batch.times[k]
                row = [str(int(batch.path_ids[p])), repr(float(t))]
                row += [repr(float(v)) for v in batch.states[p, k]]
                row.append("1" if batch.exit_times[p] <= t else "0")
                fh.write(",".join(row) + "\n")


_PATH_MAGIC = b"ZPB1"
_PATH_HEADER = struct.Struct("<4sIIId")


def write_paths_binary(batch: PathBatch, path) -> None:
    """Header (magic, n_paths, n_times, d, R), then times and states as little-endian f8."""
    with open(path, "wb") as fh:
        fh.write(_PATH_HEADER.pack(_PATH_MAGIC, batch.n_paths, len(batch.times), batch.d, batch.R))
        fh.write(np.asarray(batch.times, "<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.states, "<f8").tobytes())


def read_paths_binary(path) -> tuple[np.ndarray, np.ndarray, float]:
    raw = open(path, "rb").read()
    magic, P, nt, d, R = _PATH_HEADER.unpack_from(raw)
    if magic != _PATH_MAGIC:
        raise ParameterError(f"{path}: not a path-batch file")
    off = _PATH_HEADER.size
    times = np.frombuffer(raw, "<f8", nt, off)
    states = np.frombuffer(raw, "<f8", P * nt * d, off + 8 * nt).reshape(P, nt, d)
    return times.copy(), states.copy(), R
