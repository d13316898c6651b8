import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gaussian_u, manufactured_drifted
from zvonkin_sde import AssumptionParams, KrylovConstants, make_preset
from zvonkin_sde.analysis import Grid, GridFunction, lp_norm, sample
from zvonkin_sde.coefficients import TruncatedField, truncate
from zvonkin_sde.errors import ParameterError, SolverError
from zvonkin_sde.pde_resolvent import (ResolventConfig, apply_generator, calibrate_constants, gaussian_probes,
                                       heat_semigroup, lambda_R, lambda_R_H, picard_solve_drifted,
                                       resolvent_residual, solve_resolvent, verify_scaling, write_norm_table)


@pytest.fixture(scope="module")
def grid1():
    return Grid(1, 512, 12.0)


@pytest.fixture(scope="module")
def flat(params1):
    """a_R = identity on the test region (R large enough that the cutoffs stay inside B(R))."""
    return truncate(make_preset("brownian", 1), params1, 3.9)


def symbol(k, h):
    """Discrete symbol of the 3-point second difference."""
    return (2 * math.sin(k * h / 2) / h) ** 2


def wave(g, m):
    k = math.pi * m / g.L_box
    return k, sample(g, lambda x: np.sin(k * x[:, 0]))


def test_config_validation():
    with pytest.raises(ParameterError):
        ResolventConfig(lam=0)
    with pytest.raises(ParameterError):
        ResolventConfig(lam=1, semigroup_t_max=10)
    with pytest.raises(ParameterError):
        ResolventConfig(lam=1, picard_tol=0)
    with pytest.raises(ParameterError):
        KrylovConstants(0, 1)


def test_generator_examples(flat, grid1):
    c = GridFunction(grid1, np.full(grid1.shape, 3.0))
    assert np.allclose(apply_generator(flat, c).values, 0)
    k, w = wave(grid1, 8)
    Lw = apply_generator(flat, w).values
    inner = np.abs(grid1.axis()) < 3.5
    assert np.allclose(Lw[inner], -0.5 * symbol(k, grid1.h) * w.values[inner], atol=1e-12)
    params = AssumptionParams(d=1, p1=3.0, beta=0.5, beta_tilde=1, delta=0.5, varpi=0.5, T=1)
    two = truncate(make_preset("brownian", 1, sigma_scale=math.sqrt(2)), params, 3.9)
    q = sample(grid1, lambda x: x[:, 0] ** 2)
    Lq = apply_generator(two, q).values
    assert np.allclose(Lq[np.abs(grid1.axis()) < 3], 2.0)


def test_resolvent_examples(flat, grid1):
    zero = GridFunction(grid1, np.zeros(grid1.shape))
    assert np.all(solve_resolvent(flat, 5.0, zero).values == 0)
    one = GridFunction(grid1, np.ones(grid1.shape))
    assert np.allclose(solve_resolvent(flat, 5.0, one).values, -1 / 5.0)  # (L - lam) c = -lam c


class ConstantA(TruncatedField):
    """Stub with a_R = 1 everywhere, so on-grid waves are exact eigenfunctions."""

    def a_R(self, x):
        return np.ones((len(np.atleast_2d(x)), 1, 1))


def test_plane_wave_resolvent(params1):
    g = Grid(1, 256, np.pi * 4)
    field = ConstantA(make_preset("brownian", 1), params1, 1.0)
    k, w = wave(g, 6)
    lam = 3.0
    u = solve_resolvent(field, lam, w)
    assert np.allclose(u.values, w.values / (-symbol(k, g.h) / 2 - lam), atol=1e-12)


def test_residual_and_max_principle(bump_field_R, grid1, rng):
    f = GridFunction(grid1, -np.abs(rng.normal(size=grid1.shape)))
    u = solve_resolvent(bump_field_R, 4.0, f)
    assert u.values.min() >= -1e-8
    assert resolvent_residual(bump_field_R, 4.0, u, f) < 1e-6


@pytest.fixture(scope="module")
def bump_field_R(params1):
    return truncate(make_preset("smooth_bump", 1), params1, 2.0)


def test_semigroup_matches_direct(bump_field_R):
    g = Grid(1, 256, 12.0)
    f = sample(g, gaussian_u)
    cfg = ResolventConfig(lam=8.0, solver="semigroup-integral", picard_tol=1e-6)
    direct = solve_resolvent(bump_field_R, 8.0, f)
    semi = solve_resolvent(bump_field_R, 8.0, f, cfg)
    rel = lp_norm(semi.values - direct.values, g, 2) / lp_norm(direct.values, g, 2)
    assert rel <= 10 * cfg.picard_tol


def test_heat_semigroup_examples(flat):
    g = Grid(1, 512, 12.0)
    f = sample(g, gaussian_u)
    assert heat_semigroup(flat, f, 0.0, 0.1) is f
    c = GridFunction(g, np.full(g.shape, 2.0))
    assert np.allclose(heat_semigroup(flat, c, 0.5, 0.05).values, 2.0)
    s2, t = 1.0, 0.5
    out = heat_semigroup(flat, f, t, 0.001)
    x = g.axis()
    exact = math.sqrt(s2 / (s2 + t)) * np.exp(-x**2 / (2 * (s2 + t)))
    assert lp_norm(out.values - exact, g, 2) / lp_norm(exact, g, 2) < 1e-3


def test_picard_examples(flat, grid1):
    f = sample(grid1, gaussian_u)
    res = picard_solve_drifted(flat, 6.0, f)
    assert res.iterations == 1
    assert np.allclose(res.u.values, solve_resolvent(flat, 6.0, f).values)
    out = manufactured_drifted(1, 1024)
    assert out["error"] <= 1e-3
    iters = [manufactured_drifted(1, 512, lam=lam)["iterations"] for lam in (10.0, 40.0, 160.0)]
    assert iters[0] >= iters[1] >= iters[2]
    hist = out["result"].contraction
    assert max(hist[1:]) < 1


def test_picard_cap_raises(bump_field_R):
    g = Grid(1, 256, 12.0)
    f = sample(g, gaussian_u)
    with pytest.raises(SolverError) as exc:
        picard_solve_drifted(bump_field_R, 1.0, f, ResolventConfig(lam=1.0, picard_max_iter=3, picard_tol=1e-14))
    assert len(exc.value.history) >= 1


def test_picard_warns_below_floor(bump_field_R):
    g = Grid(1, 256, 12.0)
    f = sample(g, gaussian_u)
    with pytest.warns(RuntimeWarning, match="below lambda_R"):
        picard_solve_drifted(bump_field_R, 2.0, f, constants=KrylovConstants(1.0, 1.0))


def test_lambda_examples():
    p = AssumptionParams(d=1, p1=2.0, beta=0.0, beta_tilde=1.0, delta=0.5, varpi=0.5, T=1)
    assert lambda_R(p, KrylovConstants(1, 0.5), 7.0) == pytest.approx(1.0)
    assert lambda_R(p, KrylovConstants(1, 1.0), 3.0) == pytest.approx(16.0)
    p3 = AssumptionParams(d=1, p1=3.0, beta=2.0, beta_tilde=1.0, delta=0.5, varpi=0.5, T=1)
    K = KrylovConstants(1, 1)
    assert lambda_R(p3, K, 1.0) == pytest.approx(lambda_R(p3, K, 1.0 + 1e-12), rel=1e-9)
    assert lambda_R_H(1.0, p) == pytest.approx(16.0)
    gammas = [lambda_R_H(1.0, AssumptionParams(d=1, p1=q, beta=0, beta_tilde=1, delta=0.5, varpi=0.5, T=1))
              for q in (2.0, 4.0, 16.0, 256.0, 1e6)]
    assert all(a > b for a, b in zip(gammas, gammas[1:])) and gammas[-1] == pytest.approx(4.0, rel=1e-4)


@settings(max_examples=30, deadline=None)
@given(p1=st.floats(1.1, 50), C2=st.floats(0.1, 5), R=st.floats(1, 100))
def test_lambda_H_identity(p1, C2, R):
    p = AssumptionParams(d=1, p1=p1, beta=0.3, beta_tilde=1.0, delta=0.5, varpi=0.5, T=1)
    lr = lambda_R(p, KrylovConstants(1, C2), R)
    gamma = lambda_R_H(lr, p) / lr
    assert gamma ** (1 / (2 * p1) - 0.5) == pytest.approx(0.5, rel=1e-9)


def test_verify_scaling(flat):
    g = Grid(1, 512, 12.0)
    f = sample(g, gaussian_u)
    out = verify_scaling(flat, f, [2.0**k for k in range(4, 11)], 0.0, 2.0, 2.0)
    assert out["theoretical"] == -1.0
    assert abs(out["slope"] + 1) < 0.15
    rep = verify_scaling(flat, f, [16, 32, 64], 0.0, 2.0, math.inf)
    assert rep["theoretical"] == pytest.approx(-0.75)
    zero = GridFunction(g, np.zeros(g.shape))
    assert verify_scaling(flat, zero, [1, 2, 4], 0.0, 2.0, 2.0)["skipped"]
    with pytest.raises(ParameterError):
        verify_scaling(flat, f, [1, 2], 0.0, 2.0, 2.0)


def test_calibration(flat, tmp_path):
    g = Grid(1, 256, 12.0)
    with pytest.raises(ParameterError):
        calibrate_constants(flat, [GridFunction(g, np.zeros(g.shape))], [4.0])
    K = calibrate_constants(flat, gaussian_probes(g), [4.0, 16.0, 64.0])
    assert K.provenance == "calibrated" and K.C1 > 0 and K.C2 > 0
    K2 = calibrate_constants(flat, gaussian_probes(Grid(1, 512, 12.0)), [4.0, 16.0, 64.0])
    assert abs(K2.C2 / K.C2 - 1) < 0.2
    # plane wave: ||u||_{2,2}/||f||_2 = (1 + k^2 + k^4)^{1/2}-type ratio, finite and >= single-mode algebra
    k, w = wave(Grid(1, 256, 12.0), 4)
    Kw = calibrate_constants(flat, [w], [4.0], p=2.0, safety=1.0)
    kh = symbol(k, g.h)
    assert Kw.C1 >= 0.99 / (kh / 2 + 4.0) and math.isfinite(Kw.C1)
    write_norm_table([{"alpha": 0.0, "p_prime": 2.0, "lambda": 4.0, "norm": 1.5}], tmp_path / "n.csv")
    assert (tmp_path / "n.csv").read_text().splitlines()[0] == "alpha,p_prime,lambda,norm"
