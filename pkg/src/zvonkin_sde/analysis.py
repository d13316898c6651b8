"""Periodic-grid analysis utilities.

Grid functions live on the periodic box ``[-L, L)^d`` sampled at
``x_i = -L + i*h`` with ``h = 2L/n``.  Everything here (maximal function,
mollifier, Bessel-potential norms) is a pure transform of its inputs.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ResolutionError

_MAGIC = b"ZGF1"
_HEADER = struct.Struct("<4sIIdIIII")


@dataclass(frozen=True)
class Grid:
    d: int
    n: int
    L_box: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ParameterError(f"grid dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 16 or self.n & (self.n - 1):
            raise ParameterError(f"points per axis must be a power of two >= 16, got {self.n}")
        if not self.L_box > 0:
            raise ParameterError("L_box must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.L_box / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def axis(self) -> np.ndarray:
        return -self.L_box + self.h * np.arange(self.n)

    def coords(self) -> list[np.ndarray]:
        """Coordinate arrays, one per axis, each of shape ``self.shape``."""
        ax = self.axis()
        return list(np.meshgrid(*([ax] * self.d), indexing="ij"))

    def points(self) -> np.ndarray:
        """All nodes as an ``(n**d, d)`` array in C order."""
        return np.stack([c.ravel() for c in self.coords()], axis=-1)

    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c**2 for c in self.coords()))

    def wavenumbers(self) -> list[np.ndarray]:
        """Angular wavenumbers per axis, broadcast to ``self.shape``."""
        k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.h)
        return list(np.meshgrid(*([k] * self.d), indexing="ij"))

    def descriptor(self) -> dict:
        return {"d": self.d, "n": self.n, "L_box": float(self.L_box)}

    def check_radius(self, R: float) -> None:
        """Enforce ``3R < L_box`` so the far field is constant across the seam."""
        if not 3.0 * R < self.L_box:
            raise ParameterError(f"need 3R < L_box, got R={R}, L_box={self.L_box}")


@dataclass(frozen=True)
class GridFunction:
    grid: Grid
    values: np.ndarray
    interp_order: str = "linear"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape[: self.grid.d] != self.grid.shape:
            raise ParameterError(
                f"values shape {values.shape} does not start with grid shape {self.grid.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ParameterError("grid function values must be finite")
        if self.interp_order not in ("linear", "cubic"):
            raise ParameterError(f"unknown interpolation order {self.interp_order!r}")
        object.__setattr__(self, "values", values)

    @property
    def value_shape(self) -> tuple[int, ...]:
        return self.values.shape[self.grid.d :]

    @property
    def arity(self) -> int:
        return int(np.prod(self.value_shape, dtype=int))

    def components(self) -> np.ndarray:
        """Values reshaped to ``(arity, *grid.shape)``."""
        flat = self.values.reshape(self.grid.shape + (self.arity,))
        return np.moveaxis(flat, -1, 0)

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.grid, values, self.interp_order)

    def __call__(self, points) -> np.ndarray:
        """Periodic interpolation at arbitrary points (``(N, d)`` or ``(d,)``)."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        g = self.grid
        idx = ((pts + g.L_box) / g.h).T
        order = 1 if self.interp_order == "linear" else 3
        out = np.empty((pts.shape[0], self.arity))
        for c, comp in enumerate(self.components()):
            out[:, c] = ndimage.map_coordinates(comp, idx, order=order, mode="grid-wrap")
        out = out.reshape((pts.shape[0],) + self.value_shape)
        return out[0] if single else out

    # I/O -----------------------------------------------------------------

    def to_binary(self, path) -> None:
        vshape = self.value_shape
        dims = list(vshape) + [0] * (2 - len(vshape))
        g = self.grid
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, g.d, g.n, g.L_box, self.arity, len(vshape), *dims))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path, interp_order="linear") -> "GridFunction":
        raw = Path(path).read_bytes()
        magic, d, n, L_box, arity, vrank, d0, d1 = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise ParameterError(f"{path}: not a grid-function file")
        vshape = tuple([d0, d1][:vrank])
        grid = Grid(d, n, L_box)
        values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        if values.size != grid.size * arity:
            raise ParameterError(f"{path}: truncated payload")
        return cls(grid, values.reshape(grid.shape + vshape).copy(), interp_order)

    def to_csv(self, path) -> None:
        g = self.grid
        idx = np.indices(g.shape).reshape(g.d, -1).T
        vals = self.values.reshape(g.size, self.arity)
        with open(path, "w", newline="") as fh:
            vshape = ",".join(str(s) for s in self.value_shape)
            fh.write(f"# d={g.d} n={g.n} L_box={g.L_box!r} value_shape={vshape}\n")
            w = csv.writer(fh)
            w.writerow([f"i{k + 1}" for k in range(g.d)] + [f"v{k + 1}" for k in range(self.arity)])
            for i, v in zip(idx, vals):
                w.writerow(list(i) + [repr(float(x)) for x in v])

    @classmethod
    def from_csv(cls, path, interp_order="linear") -> "GridFunction":
        with open(path, newline="") as fh:
            meta = dict(kv.split("=", 1) for kv in fh.readline().lstrip("# ").split())
            reader = csv.reader(fh)
            next(reader)
            rows = np.array([[float(x) for x in row] for row in reader])
        grid = Grid(int(meta["d"]), int(meta["n"]), float(meta["L_box"]))
        vshape = tuple(int(s) for s in meta["value_shape"].split(",") if s)
        arity = int(np.prod(vshape, dtype=int))
        values = np.empty((grid.size, arity))
        flat = np.ravel_multi_index(rows[:, : grid.d].astype(int).T, grid.shape)
        values[flat] = rows[:, grid.d :]
        return cls(grid, values.reshape(grid.shape + vshape), interp_order)


def sample(grid: Grid, func, value_shape=(), interp_order="linear") -> GridFunction:
    """Evaluate a vectorised ``func(points) -> (N, *value_shape)`` at every node."""
    vals = np.asarray(func(grid.points()), dtype=float)
    return GridFunction(grid, vals.reshape(grid.shape + tuple(value_shape)), interp_order)


def sample_cell_average(grid: Grid, func, value_shape=(), sub=4) -> GridFunction:
    """Cell averages of ``func`` by a ``sub**d`` midpoint rule around each node.

    Sub-points never coincide with the node itself, so integrable point
    singularities on nodes stay finite.  Non-finite samples raise.
    """
    if sub < 2 or sub % 2:
        raise ParameterError("sub must be an even integer >= 2")
    offsets = ((np.arange(sub) + 0.5) / sub - 0.5) * grid.h
    base = grid.points()
    acc = np.zeros((grid.size,) + tuple(value_shape))
    for off in np.stack(np.meshgrid(*([offsets] * grid.d), indexing="ij"), -1).reshape(-1, grid.d):
        vals = np.asarray(func(base + off), dtype=float).reshape(acc.shape)
        bad = ~np.isfinite(vals.reshape(grid.size, -1)).all(axis=1)
        if bad.any():
            raise ResolutionError(
                f"non-finite coefficient value at {base[bad][0] + off}; "
                "singularity too strong for cell averaging"
            )
        acc += vals
    acc /= sub**grid.d
    return GridFunction(grid, acc.reshape(grid.shape + tuple(value_shape)))


# Pointwise magnitudes and norms --------------------------------------------


def magnitude(values: np.ndarray, d: int) -> np.ndarray:
    """Euclidean / Hilbert-Schmidt magnitude over the value axes."""
    v = np.asarray(values, dtype=float)
    if v.ndim == d:
        return np.abs(v)
    return np.sqrt(np.sum(v.reshape(v.shape[:d] + (-1,)) ** 2, axis=-1))


def lp_norm(values: np.ndarray, grid: Grid, p: float) -> float:
    """Cell-volume-weighted discrete L^p norm; ``p=inf`` is the grid maximum."""
    m = magnitude(values, grid.d)
    if np.isinf(p):
        return float(m.max())
    if p < 1:
        raise ParameterError(f"p must be >= 1, got {p}")
    return float((np.sum(m**p) * grid.cell_volume) ** (1.0 / p))


def gradient(u: GridFunction) -> GridFunction:
    """Centered-difference gradient; a trailing axis of length d is appended."""
    g = u.grid
    axes = range(g.d)
    parts = [
        (np.roll(u.values, -1, axis=a) - np.roll(u.values, 1, axis=a)) / (2.0 * g.h) for a in axes
    ]
    return u.with_values(np.stack(parts, axis=-1))


def spectral_gradient(u: GridFunction) -> GridFunction:
    g = u.grid
    ks = g.wavenumbers()
    comps = u.components()
    parts = []
    for k in ks:
        spec = np.fft.fftn(comps, axes=tuple(range(1, g.d + 1)))
        d_comp = np.real(np.fft.ifftn(1j * k * spec, axes=tuple(range(1, g.d + 1))))
        parts.append(np.moveaxis(d_comp, 0, -1).reshape(g.shape + u.value_shape))
    return u.with_values(np.stack(parts, axis=-1))


def hessian(u: GridFunction) -> GridFunction:
    """Second differences (3-point on the diagonal, 4-point cross off it)."""
    g = u.grid
    v = u.values
    h2 = g.h**2
    out = np.empty(v.shape + (g.d, g.d))
    for i in range(g.d):
        out[..., i, i] = (np.roll(v, -1, i) - 2.0 * v + np.roll(v, 1, i)) / h2
        for j in range(i + 1, g.d):
            pp = np.roll(np.roll(v, -1, i), -1, j)
            pm = np.roll(np.roll(v, -1, i), 1, j)
            mp = np.roll(np.roll(v, 1, i), -1, j)
            mm = np.roll(np.roll(v, 1, i), 1, j)
            out[..., i, j] = out[..., j, i] = (pp - pm - mp + mm) / (4.0 * h2)
    return u.with_values(out)


def sobolev_norm(u: GridFunction, order: int, p: float) -> float:
    """Discrete ``W^{m,p}`` norm: sum of the L^p norms of derivatives up to ``order``."""
    if order not in (0, 1, 2):
        raise ParameterError("only orders 0, 1, 2 are supported")
    g = u.grid
    total = lp_norm(u.values, g, p)
    if order >= 1:
        total += lp_norm(gradient(u).values, g, p)
    if order == 2:
        total += lp_norm(hessian(u).values, g, p)
    return total


def w1inf_norm(u: GridFunction) -> float:
    """``sup|u| + sup|grad u|`` with centered differences."""
    return sobolev_norm(u, 1, np.inf)


def bessel_norm(f: GridFunction, alpha: float, p: float) -> float:
    """``||(I - Laplacian)^{alpha/2} f||_p`` via the periodic Fourier multiplier.

    For ``p != 2`` this is the grid multiplier norm, not the exact Bessel
    potential norm on R^d.
    """
    if alpha < 0:
        raise ParameterError("alpha must be >= 0")
    g = f.grid
    ax = tuple(range(1, g.d + 1))
    k2 = sum(k**2 for k in g.wavenumbers())
    symbol = (1.0 + k2) ** (alpha / 2.0)
    comps = f.components()
    out = np.real(np.fft.ifftn(symbol * np.fft.fftn(comps, axes=ax), axes=ax))
    return lp_norm(np.moveaxis(out, 0, -1), g, p)


# Maximal function and mollifier -------------------------------------------


def _periodic_distance(grid: Grid) -> np.ndarray:
    """Distance from the origin node to every node, minimal image."""
    idx = np.arange(grid.n)
    off = np.minimum(idx, grid.n - idx) * grid.h
    mesh = np.meshgrid(*([off] * grid.d), indexing="ij")
    return np.sqrt(sum(m**2 for m in mesh))


def _convolve(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    axes = tuple(range(values.ndim))
    return np.fft.irfftn(np.fft.rfftn(values) * np.fft.rfftn(kernel), s=values.shape, axes=axes)


def maximal_function(f: GridFunction, ladder: str = "dyadic") -> GridFunction:
    """Discrete Hardy-Littlewood maximal function of a nonnegative scalar field.

    Ball averages over nodes within distance r, for r on the ladder
    ``{cell, h, 2h, 4h, ..., L_box}`` (``ladder="full"`` uses every multiple
    of h).  The dyadic sup is within a factor 2**d of the full one.
    """
    g = f.grid
    if f.value_shape:
        raise ParameterError("maximal_function expects a scalar field")
    if np.any(f.values < 0):
        raise ParameterError("maximal_function expects a nonnegative field (pass |f|)")
    if ladder == "dyadic":
        radii = [g.h * 2**k for k in range(int(np.floor(np.log2(g.L_box / g.h))) + 1)]
    elif ladder == "full":
        radii = list(g.h * np.arange(1, int(np.floor(g.L_box / g.h)) + 1))
    else:
        raise ParameterError(f"unknown ladder {ladder!r}")
    dist = _periodic_distance(g)
    best = f.values.copy()
    for r in radii:
        ball = (dist <= r * (1 + 1e-12)).astype(float)
        avg = _convolve(f.values, ball / ball.sum())
        np.maximum(best, avg, out=best)
    return f.with_values(best)


def maximal_pointwise_bound_check(phi: GridFunction, samples, grad: GridFunction | None = None,
                                  ladder: str = "dyadic") -> dict:
    """Empirical constant in ``|phi(x)-phi(y)| <= C |x-y| (M|grad phi|(x) + M|grad phi|(y))``.

    ``samples`` is a sequence of point pairs.  Pairs whose denominator is
    below ``1e-12 * scale`` are skipped and counted.
    """
    g = phi.grid
    if grad is None:
        grad = spectral_gradient(phi)
    mg = maximal_function(grad.with_values(magnitude(grad.values, g.d)), ladder)
    pairs = np.asarray(samples, dtype=float).reshape(-1, 2, g.d)
    x, y = pairs[:, 0], pairs[:, 1]
    num = np.abs(phi(x) - phi(y))
    dist = np.linalg.norm(x - y, axis=1)
    den = dist * (mg(x) + mg(y))
    scale = 2.0 * g.L_box * max(float(mg.values.max()), np.finfo(float).tiny)
    keep = den >= 1e-12 * scale if mg.values.max() > 0 else np.zeros(len(den), bool)
    ratios = num[keep] / den[keep]
    return {
        "C_estimate": float(ratios.max()) if ratios.size else None,
        "defined": bool(ratios.size),
        "n_pairs": int(len(den)),
        "n_skipped": int((~keep).sum()),
        "ratios": ratios,
    }


def bump(r: np.ndarray) -> np.ndarray:
    """Standard bump ``exp(-1/(1-r^2))`` on ``r < 1``, zero elsewhere."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def mollify(f: GridFunction, n: int) -> GridFunction:
    """Convolve with the unit-mass bump of radius ``1/n`` (renormalised on the grid)."""
    g = f.grid
    if n <= 0:
        raise ParameterError("mollifier index must be positive")
    if 1.0 / n < 2.0 * g.h:
        raise ResolutionError(
            f"mollifier radius 1/{n} is below two grid spacings ({2 * g.h:.3g}); refine the grid"
        )
    kernel = bump(_periodic_distance(g) * n)
    kernel /= kernel.sum()
    comps = np.stack([_convolve(c, kernel) for c in f.components()])
    return f.with_values(np.moveaxis(comps, 0, -1).reshape(f.values.shape))
