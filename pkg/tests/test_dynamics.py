"""Reaction terms, the coupled operator, and one-sided Lipschitz structure."""

import numpy as np
import pytest

from fhn_control.dynamics import (
    FhnParams,
    a_apply,
    a_star_apply,
    df_apply,
    f_apply,
    i_ion,
    i_ion_prime,
    one_sided_margin,
)
from fhn_control.errors import ConfigurationError
from fhn_control.grid import (
    Grid,
    StateX,
    inner_h,
    inner_l2,
    neumann_laplacian,
    norm_l2_sq,
)


def test_cubic_roots():
    p = FhnParams(a=0.25, b=1.0)
    for r in (0.0, 0.25, 1.0):
        assert i_ion(p, r) == pytest.approx(0.0)
    assert i_ion(p, 2.0) == pytest.approx(2.0 * 1.75 * 1.0)


def test_cubic_derivative_matches_finite_difference():
    p = FhnParams(a=0.3, b=0.9)
    v = np.linspace(-2, 2, 17)
    h = 1e-6
    fd = (i_ion(p, v + h) - i_ion(p, v - h)) / (2 * h)
    np.testing.assert_allclose(i_ion_prime(p, v), fd, atol=1e-7)


def test_linear_mode_disables_cubic():
    p = FhnParams(linear=True)
    v = np.linspace(-3, 3, 9)
    np.testing.assert_array_equal(i_ion(p, v), np.zeros_like(v))
    np.testing.assert_array_equal(i_ion_prime(p, v), np.zeros_like(v))
    assert p.eta == 0.0


def test_eta_formula():
    # minimum of 3v^2 - 2(a+b)v + ab over v is ab - (a+b)^2/3 at v = (a+b)/3
    p = FhnParams(a=0.25, b=1.0)
    v_star = (p.a + p.b) / 3.0
    assert i_ion_prime(p, v_star) == pytest.approx(-p.eta)
    v = np.linspace(-5, 5, 2001)
    assert np.min(i_ion_prime(p, v)) >= -p.eta - 1e-9
    # a = b = 0 gives a pure cubic, monotone, so eta = 0
    assert FhnParams(a=0.0, b=0.0).eta == 0.0


def test_params_validation():
    with pytest.raises(ConfigurationError):
        FhnParams(gamma=0.0)
    with pytest.raises(ConfigurationError):
        FhnParams(delta=-1.0)


def test_forcing_scalar_and_field():
    g = Grid(1, 8)
    p = FhnParams(f=1.5)
    np.testing.assert_array_equal(p.forcing(g), g.constant(1.5))
    field = np.arange(8.0)
    p2 = FhnParams(f=field)
    np.testing.assert_array_equal(p2.forcing(g), field)


def test_f_apply_reaction_only_in_voltage():
    g = Grid(1, 16)
    p = FhnParams(f=0.2)
    rng = np.random.default_rng(1)
    X = StateX(rng.standard_normal(g.shape), rng.standard_normal(g.shape))
    out = f_apply(p, g, X)
    np.testing.assert_allclose(out.v, -i_ion(p, X.v) + 0.2)
    np.testing.assert_array_equal(out.w, g.zeros())


def test_df_apply_is_derivative_of_f_apply():
    g = Grid(1, 16)
    p = FhnParams()
    rng = np.random.default_rng(2)
    X = StateX(rng.standard_normal(g.shape), rng.standard_normal(g.shape))
    Z = StateX(rng.standard_normal(g.shape), rng.standard_normal(g.shape))
    h = 1e-6
    fd_v = (f_apply(p, g, X + h * Z).v - f_apply(p, g, X - h * Z).v) / (2 * h)
    np.testing.assert_allclose(df_apply(p, g, X, Z).v, fd_v, atol=1e-6)


def test_a_star_is_weighted_adjoint():
    rng = np.random.default_rng(4)
    for g in [Grid(1, 24), Grid(2, 10)]:
        p = FhnParams(gamma=0.7, delta=1.1)
        for _ in range(10):
            X = StateX(rng.standard_normal(g.shape), rng.standard_normal(g.shape))
            Y = StateX(rng.standard_normal(g.shape), rng.standard_normal(g.shape))
            lhs = inner_h(g, p.gamma, a_apply(p, g, X), Y)
            rhs = inner_h(g, p.gamma, X, a_star_apply(p, g, Y))
            assert abs(lhs - rhs) <= 1e-10 * (1 + abs(lhs))


def test_skew_cancellation_identity():
    # <AX, X>_H collapses to gamma<Lap v, v> - delta|w|^2: the coupling
    # terms cancel exactly thanks to the gamma-weighted inner product
    rng = np.random.default_rng(6)
    g = Grid(1, 32)
    p = FhnParams()
    for _ in range(50):
        X = StateX(rng.standard_normal(g.shape), rng.standard_normal(g.shape))
        got = inner_h(g, p.gamma, a_apply(p, g, X), X)
        expected = p.gamma * inner_l2(g, neumann_laplacian(g, X.v), X.v) - p.delta * norm_l2_sq(g, X.w)
        assert abs(got - expected) <= 1e-12 * (1 + abs(expected))


def test_one_sided_margin_below_eta():
    g = Grid(1, 16)
    for a, b in [(0.25, 1.0), (0.0, 0.0), (0.5, 0.5)]:
        p = FhnParams(a=a, b=b)
        out = one_sided_margin(p, g, 5000, np.random.default_rng(0))
        assert out["eta"] == pytest.approx(p.eta)
        assert out["sampled_margin"] <= p.eta + 1e-9


def test_one_sided_margin_nearly_attained():
    # pairs straddling the derivative minimum approach the bound
    g = Grid(1, 8)
    p = FhnParams(a=0.25, b=1.0)
    v_star = (p.a + p.b) / 3.0
    e = 1e-4
    x = StateX(g.constant(v_star + e), g.zeros())
    y = StateX(g.constant(v_star - e), g.zeros())
    dv = x.v - y.v
    dfv = -(i_ion(p, x.v) - i_ion(p, y.v))
    ratio = inner_l2(g, dfv, dv) / norm_l2_sq(g, dv)
    assert ratio == pytest.approx(p.eta, abs=1e-6)


def test_one_sided_margin_rejects_bad_count():
    g = Grid(1, 8)
    with pytest.raises(ConfigurationError):
        one_sided_margin(FhnParams(), g, 0, np.random.default_rng(0))
