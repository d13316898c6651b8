import math

import numpy as np
import pytest

from zvonkin_sde import AssumptionParams, KrylovConstants, make_preset
from zvonkin_sde.analysis import Grid
from zvonkin_sde.coefficients import truncate
from zvonkin_sde.errors import ConvergenceError, RegularityError
from zvonkin_sde.zvonkin import (build_map, export_map, forward, identity_map, inverse, load_map, map_residual,
                                 transform_coefficients)


@pytest.fixture(scope="module")
def bump_R(params1):
    return truncate(make_preset("smooth_bump", 1, amplitude=0.5), params1, 2.0)


@pytest.fixture(scope="module")
def bump_map(bump_R):
    return build_map(bump_R, None, None, 100.0, Grid(1, 1024, 12.0))


def test_zero_drift_identity(params1):
    tf = truncate(make_preset("zero", 1), params1, 2.0)
    zmap = build_map(tf, None, None, 10.0, Grid(1, 256, 12.0))
    assert zmap.sup_u == 0 and zmap.sup_grad_u == 0
    x = np.linspace(-5, 5, 11)[:, None]
    assert np.array_equal(forward(zmap, x), x)
    assert np.array_equal(inverse(zmap, x), x)
    tc = transform_coefficients(zmap, tf)
    assert np.all(tc.drift_t(x) == 0)
    assert np.allclose(tc.diffusion_t(x), tf.diffusion_R(x))


def test_leading_order_sup_u(params1):
    small = truncate(make_preset("smooth_bump", 1, amplitude=0.05), params1, 2.0)
    zmap = build_map(small, None, None, 2000.0, Grid(1, 1024, 12.0))
    b_sup = float(np.max(np.abs(small.drift_R(np.linspace(-2, 2, 4001)[:, None]))))
    assert zmap.sup_u == pytest.approx(b_sup / 2000.0, rel=0.05)


def test_lambda_monotone(bump_R):
    g = Grid(1, 512, 12.0)
    maps = [build_map(bump_R, None, None, lam, g) for lam in (50.0, 100.0, 200.0)]
    assert all(b.sup_u <= a.sup_u for a, b in zip(maps, maps[1:]))
    assert all(b.sup_grad_u <= a.sup_grad_u for a, b in zip(maps, maps[1:]))


def test_regularity_error(params1):
    tf = truncate(make_preset("ou", 1), params1, 4.0)
    with pytest.raises(RegularityError, match="increase lambda"):
        build_map(tf, None, None, 20.0, Grid(1, 1024, 24.0))


def test_warns_below_lambda_floor(bump_R):
    with pytest.warns(RuntimeWarning, match="below lambda_R_H"):
        zmap = build_map(bump_R, None, KrylovConstants(1.0, 1.0), 100.0, Grid(1, 256, 12.0))
    assert zmap.lam_floor > 100.0 and zmap.warnings


def test_forward_far_field(bump_map):
    far = np.array([[13.0], [-40.0]])
    assert np.array_equal(forward(bump_map, far), far)


def test_bilipschitz_and_growth(bump_map, rng):
    x = rng.uniform(-6, 6, size=(10_000, 1))
    y = x + rng.normal(scale=rng.choice([1e-3, 1e-1, 1.0], size=(10_000, 1)))
    dx = np.abs(x - y)[:, 0]
    dphi = np.abs(forward(bump_map, x) - forward(bump_map, y))[:, 0]
    assert np.all(dphi >= 0.5 * dx) and np.all(dphi <= 2 * dx)
    assert np.all(np.abs(forward(bump_map, x)) <= np.abs(x) + 0.5)
    assert np.all(np.abs(inverse(bump_map, x)) <= np.abs(x) + 0.5)
    h = 1e-4
    assert np.all(np.abs(forward(bump_map, x + h) - forward(bump_map, x)) / h <= 2)
    assert np.all(np.abs(inverse(bump_map, x + h) - inverse(bump_map, x)) / h <= 2 + 1e-6)


def test_inverse_round_trip_and_rate(bump_map, rng):
    y = rng.uniform(-3, 3, size=(500, 1))
    z, it = inverse(bump_map, y, tol=1e-12, return_iterations=True)
    assert np.all(np.abs(forward(bump_map, z) - y) <= 1e-12)
    u0 = np.abs(bump_map.u_at(y))[:, 0]
    rate = bump_map.sup_grad_u
    bound = np.where(u0 > 1e-12, np.log(1e-12 / np.maximum(u0, 1e-300)) / math.log(rate) + 1, 0)
    assert np.all(it <= np.ceil(bound) + 1)


def test_inverse_cap(bump_map):
    with pytest.raises(ConvergenceError):
        inverse(bump_map, [[0.3]], tol=0.0, max_iter=2)


def test_transformed_bounds(bump_map, bump_R):
    tc = transform_coefficients(bump_map, bump_R)
    y = np.linspace(-7, 7, 2001)[:, None]
    assert np.max(np.abs(tc.drift_t(y))) <= bump_map.lam * bump_map.sup_u + 1e-9
    assert bump_map.sup_u <= 0.5
    s_sup = np.max(np.linalg.norm(bump_R.diffusion_R(y), axis=(1, 2), ord=2))
    assert np.max(np.linalg.norm(tc.diffusion_t(y), axis=(1, 2), ord=2)) <= 2 * s_sup


def test_map_residual(bump_map, bump_R):
    assert max(map_residual(bump_map, bump_R)) < 1e-6


def test_export_roundtrip(bump_map, tmp_path):
    export_map(bump_map, tmp_path / "m")
    back = load_map(tmp_path / "m")
    assert np.array_equal(back.u.values, bump_map.u.values)
    assert back.lam == bump_map.lam and back.sup_grad_u == bump_map.sup_grad_u


def test_cache(bump_R, tmp_path):
    g = Grid(1, 256, 12.0)
    a = build_map(bump_R, None, None, 100.0, g, cache_dir=tmp_path)
    assert len(list(tmp_path.iterdir())) == 1
    b = build_map(bump_R, None, None, 100.0, g, cache_dir=tmp_path)
    assert np.array_equal(a.u.values, b.u.values)


def test_two_dimensional_map():
    p = AssumptionParams(d=2, p1=4.0, beta=0.5, beta_tilde=1.0, delta=0.5, varpi=0.5, T=1.0)
    tf = truncate(make_preset("smooth_bump", 2, amplitude=0.5), p, 1.0)
    zmap = build_map(tf, None, None, 50.0, Grid(2, 64, 6.0))
    assert zmap.sup_grad_u <= 0.5
    rng = np.random.default_rng(1)
    y = rng.uniform(-2, 2, size=(100, 2))
    assert np.allclose(forward(zmap, inverse(zmap, y)), y, atol=1e-9)
    assert identity_map(Grid(2, 16, 6.0), 1.0).sup_u == 0
