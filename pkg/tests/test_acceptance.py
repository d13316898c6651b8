"""Acceptance criteria 1-11 at their stated tolerances.

Each test prints one ``criterion N: PASS|FAIL ...`` line; the lines are also
collected into the terminal summary of the pytest run.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import manufactured_drifted, normal_cdf, ou_mean, ou_var
from zvonkin_sde import PipelineSpec, SimConfig, build_pipeline, make_preset
from zvonkin_sde.analysis import Grid, sample
from zvonkin_sde.coefficients import truncate
from zvonkin_sde.estimators import (MonteCarloEstimate, doleans_decompose, holder_time_check, injectivity_gap,
                                    khasminskii_check, ladder_stable, two_point_ratio)
from zvonkin_sde.pde_resolvent import lambda_R, verify_scaling
from zvonkin_sde.simulator import shared_noise_bundle, simulate_direct, simulate_transformed, two_point
from zvonkin_sde.zvonkin import forward

pytestmark = pytest.mark.acceptance


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def mean_se(x):
    est = MonteCarloEstimate.from_samples(x)
    return est.mean, est.stderr


def test_criterion_1_manufactured_pde():
    one = manufactured_drifted(1, 1024)
    two = manufactured_drifted(2, 256)
    ok = one["error"] <= 1e-3 and two["error"] <= 1e-2 and one["seconds"] <= 60 and two["seconds"] <= 60
    record(1, ok, f"d=1 err={one['error']:.2e} ({one['seconds']:.1f}s) "
                  f"d=2 err={two['error']:.2e} ({two['seconds']:.1f}s)")


def test_criterion_2_resolvent_scaling(params1):
    field = truncate(make_preset("brownian", 1), params1, 3.9)
    g = Grid(1, 512, 12.0)
    f = sample(g, lambda x: np.exp(-x[:, 0] ** 2))
    t0 = time.perf_counter()
    out = verify_scaling(field, f, [2.0**k for k in range(4, 11)], 0.0, 2.0, 2.0)
    sec = time.perf_counter() - t0
    ok = abs(out["slope"] - out["theoretical"]) <= 0.15 * abs(out["theoretical"]) and sec <= 120
    record(2, ok, f"slope={out['slope']:.4f} theory={out['theoretical']:.2f} ({sec:.1f}s)")


def test_criterion_3_map_bounds(singular_pipe):
    zmap = singular_pipe.zmap
    rng = np.random.default_rng(3)
    x = rng.uniform(-6, 6, size=(10_000, 1))
    y = x + rng.normal(scale=rng.choice([1e-3, 1e-1, 1.0], size=(10_000, 1)))
    dx = np.abs(x - y)[:, 0]
    dphi = np.abs(forward(zmap, x) - forward(zmap, y))[:, 0]
    bad = int(np.sum((dphi < 0.5 * dx) | (dphi > 2 * dx)))
    ok = zmap.sup_u <= 0.52 and zmap.sup_grad_u <= 0.6 and bad == 0
    record(3, ok, f"lambda={zmap.lam:.1f} sup|u|={zmap.sup_u:.4f} sup|grad u|={zmap.sup_grad_u:.4f} "
                  f"violations={bad}")


def test_criterion_4_zvonkin_consistency(params1):
    pipe = build_pipeline(make_preset("smooth_bump", 1), params1, 2.0, PipelineSpec(n=1024))
    cfg = SimConfig(1.0, 1e-3, 100_000, seed=4, record_stride=1000)
    t0 = time.perf_counter()
    a = simulate_transformed(pipe.transformed, pipe.zmap, [0.5], cfg).at(1.0)[:, 0]
    b = simulate_direct(pipe.field, 16, [0.5], cfg, grid=pipe.grid).at(1.0)[:, 0]
    sec = time.perf_counter() - t0
    (ma, sa), (mb, sb) = mean_se(a), mean_se(b)
    diff, tol = abs(ma - mb), 3 * math.hypot(sa, sb) + 5 * cfg.dt
    record(4, diff <= tol and sec <= 300, f"|diff|={diff:.2e} tol={tol:.2e} ({sec:.1f}s)")


def test_criterion_5_ou_oracle(params1):
    pipe = build_pipeline(make_preset("ou", 1), params1, 4.0, PipelineSpec(n=1024, lam=64.0))
    cfg = SimConfig(1.0, 1e-3, 10_000, seed=5, record_stride=250)
    batch = simulate_transformed(pipe.transformed, pipe.zmap, [1.0], cfg)
    ok, parts = True, []
    for t in (0.25, 0.5, 1.0):
        x = batch.at(t)[:, 0]
        m, se = mean_se(x)
        v = np.var(x, ddof=1)
        v_se = v * math.sqrt(2 / (len(x) - 1))
        zm, zv = abs(m - ou_mean(1.0, t)) / se, abs(v - ou_var(t)) / v_se
        ok &= zm <= 3 and zv <= 3
        parts.append(f"t={t}: mean {zm:.2f}se var {zv:.2f}se")
    record(5, ok, "; ".join(parts))


def test_criterion_6_khasminskii(params1):
    pipe = build_pipeline(make_preset("brownian", 1), params1, 4.0, PipelineSpec(n=512))
    lam_R = lambda_R(params1, pipe.constants, 4.0)
    cfg = SimConfig(1.0, 1e-3, 10_000, seed=6, record_stride=1)
    batch = simulate_transformed(pipe.transformed, pipe.zmap, [0.0], cfg)
    ind = khasminskii_check(batch, lambda x: (np.abs(x[:, 0]) <= 1).astype(float), 1.0, 2.0, lam_R,
                            pipe.constants, f_norm=math.sqrt(2))
    c = 0.7
    const = khasminskii_check(batch, lambda x: np.full(len(x), c), 1.0, 2.0, lam_R, pipe.constants, f_norm=10.0)
    rel = abs(const.empirical.mean - math.exp(c)) / math.exp(c)
    ok = ind.passed and ind.analytic_bound > math.e and rel <= 1e-6
    record(6, ok, f"E={ind.empirical.mean:.4f}+/-{ind.empirical.stderr:.4f} bound={ind.analytic_bound:.4g} "
                  f"const rel err={rel:.1e}")


def test_criterion_7_two_point(brownian_pipe, singular_pipe):
    alphas = (-2.0, -1.0, 1.0, 2.0)
    cfg = SimConfig(1.0, 0.01, 1000, seed=7, record_stride=100)
    tp = two_point(brownian_pipe.transformed, brownian_pipe.zmap, [0.0], [0.1], cfg, record_y=False)
    additive = max(abs(two_point_ratio(tp, a).mean - 1) for a in alphas)
    cfg = SimConfig(1.0, 1e-3, 10_000, seed=9, record_stride=1000)
    spreads = {}
    finite = True
    for a in alphas:
        vals = []
        for gap in (1e-3, 1e-2, 1e-1):
            tp = two_point(singular_pipe.transformed, singular_pipe.zmap, [0.5], [0.5 + gap], cfg, record_y=False)
            r = two_point_ratio(tp, a)
            finite &= math.isfinite(r.mean) and r.mean > 0
            vals.append(r.mean)
        spreads[a] = max(vals) / min(vals)
    ok = additive <= 1e-9 and finite and max(spreads.values()) < 3
    record(7, ok, f"additive max|r-1|={additive:.1e} singular spreads "
                  + " ".join(f"a={a:g}:{s:.2f}" for a, s in spreads.items()))


def test_criterion_8_doleans(params1):
    pipe = build_pipeline(make_preset("smooth_bump", 1), params1, 2.0, PipelineSpec(n=1024))
    errs, mart = [], None
    for dt in (1e-2, 1e-3, 1e-4):
        cfg = SimConfig(1.0, dt, 1000, seed=8)
        tp = two_point(pipe.transformed, pipe.zmap, [0.0], [0.1], cfg)
        dd = doleans_decompose(tp, pipe.zmap, pipe.transformed, 2.0)
        errs.append(dd.reconstruction_error)
        mart = dd.martingale
    mono = all(b < a for a, b in zip(errs, errs[1:]))
    mz = abs(mart.mean - 1) / mart.stderr if mart.stderr > 0 else 0.0
    ok = errs[-1] <= 1e-2 and mono and mz <= 3
    record(8, ok, "errors " + " ".join(f"{e:.2e}" for e in errs) + f" E[M]={mart.mean:.4f} ({mz:.2f}se)")


def test_criterion_9_strong_feller(brownian_pipe):
    from zvonkin_sde.estimators import strong_feller_modulus
    xs = np.linspace(-1.0, 1.0, 10)
    cfg = SimConfig(1.0, 0.01, 20_000, seed=10, record_stride=100)
    out = strong_feller_modulus(brownian_pipe, lambda x: (x[:, 0] > 0).astype(float), 1.0, xs, cfg)
    worst = 0.0
    for r, x in zip(out["rows"], xs[1:]):
        exact = normal_cdf(x) - normal_cdf(xs[0])
        worst = max(worst, abs(r["signed_diff"] - exact) / r["stderr"])
    for v, x in zip(out["values"], xs):
        worst = max(worst, abs(v.mean - normal_cdf(x)) / v.stderr)
    record(9, worst <= 3, f"max deviation {worst:.2f} stderr over {len(xs)} starts")


def test_criterion_10_injectivity(singular_pipe):
    starts = np.linspace(-1.0, 1.0, 20).reshape(-1, 1)
    cfg = SimConfig(1.0, 1e-3, 1000, seed=11, record_stride=1000)
    out = injectivity_gap(shared_noise_bundle(singular_pipe.transformed, singular_pipe.zmap, starts, cfg))
    ok = out["min_gap"] > 1e-6 * out["min_start_gap"] and out["clipped"] == 0
    record(10, ok, f"min gap={out['min_gap']:.3e} min start gap={out['min_start_gap']:.3e} "
                   f"clipped={out['clipped']}")


def test_criterion_11_holder(brownian_pipe):
    cfg = SimConfig(1.0, 1e-3, 20_000, seed=12)
    rows = holder_time_check(simulate_transformed(brownian_pipe.transformed, brownian_pipe.zmap, [0.0], cfg), 2.0)
    d = 1
    worst = max(abs(r["ratio"] - d) / r["stderr"] for r in rows)
    ok = ladder_stable(rows) and worst <= 3
    record(11, ok, f"{len(rows)} rungs, ratios " + " ".join(f"{r['ratio']:.3f}" for r in rows)
                   + f" max |ratio-d|={worst:.2f}se")
