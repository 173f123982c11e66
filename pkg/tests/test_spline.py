import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fskan.spline import (
    SplineConfig,
    SplineError,
    UnivariateFunction,
    basis,
    basis_with_derivative,
    fit_function,
    from_affine,
    from_piecewise_linear,
    from_relu,
    random_function,
    uniform_knots,
)


def cox_de_boor(i, p, x, t):
    """Textbook recursive basis with half-open intervals (closed at the last knot)."""
    if p == 0:
        if t[i] <= x < t[i + 1]:
            return 1.0
        last = len(t) - 1
        while last > 0 and t[last - 1] == t[last]:
            last -= 1
        return 1.0 if (x == t[-1] and i + 1 == last) else 0.0
    out = 0.0
    if t[i + p] != t[i]:
        out += (x - t[i]) / (t[i + p] - t[i]) * cox_de_boor(i, p - 1, x, t)
    if t[i + p + 1] != t[i + 1]:
        out += (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * cox_de_boor(i + 1, p - 1, x, t)
    return out


def naive_value(f, x):
    nb = len(f.coeffs)
    b = sum(f.coeffs[i] * cox_de_boor(i, f.degree, x, f.knots) for i in range(nb))
    base = {"silu": x / (1 + np.exp(-x)), "identity": x, "none": 0.0}[f.base_kind]
    return f.w_base * base + f.w_spline * b


def test_uniform_knots_layout():
    k = uniform_knots(-1, 1, 5, 3)
    assert len(k) == 5 + 2 * 3 + 1
    assert k[3] == -1 and k[8] == 1
    assert np.allclose(np.diff(k), 0.4)


def test_knot_errors():
    with pytest.raises(SplineError):
        uniform_knots(1, 1, 5, 3)
    with pytest.raises(SplineError):
        uniform_knots(0, 1, 0, 3)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_basis_matches_cox_de_boor(degree):
    rng = np.random.default_rng(degree)
    f = random_function(rng, -1, 1, num_intervals=5, degree=degree)
    xs = np.concatenate([rng.uniform(-1, 1, 30), f.knots[degree:len(f.knots) - degree]])
    for x in xs:
        assert abs(f(x) - naive_value(f, x)) < 1e-12


@pytest.mark.parametrize("lo, hi, G", [(-1, 1, 5), (-3, 3, 5), (0, 3, 7), (-2.5, 1.3, 16)])
def test_cubic_fast_path_matches_general_recursion(lo, hi, G):
    k = uniform_knots(lo, hi, G, 3)
    x = np.random.default_rng(0).uniform(lo, hi, 2000)
    B, dB = basis_with_derivative(x, k, 3)
    for i in range(0, 2000, 97):
        for j in range(len(k) - 4):
            assert abs(B[i, j] - cox_de_boor(j, 3, x[i], k)) < 1e-12


@given(st.floats(-1, 1), st.integers(1, 12), st.integers(1, 4))
@settings(max_examples=200, deadline=None)
def test_partition_of_unity(x, G, p):
    B = basis(np.array([x]), uniform_knots(-1, 1, G, p), p)
    assert abs(B.sum() - 1.0) < 1e-12
    assert np.all(B >= -1e-15)


def test_linear_extrapolation_outside_grid():
    rng = np.random.default_rng(3)
    f = random_function(rng, base_kind="none")
    v1, d1, _ = f.eval_grad(1.0 - 1e-12)
    for x in (1.5, 3.0):
        assert abs(f(x) - (f(1.0) + d1 * (x - 1.0))) < 1e-9
    v0, d0, _ = f.eval_grad(-1.0)
    assert abs(f(-2.0) - (v0 - d0)) < 1e-9


def test_eval_rejects_non_finite():
    f = from_relu()
    for bad in (np.nan, np.inf):
        with pytest.raises(SplineError):
            f(bad)


def test_gradient_finite_differences_many():
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(100):
        kind = ("silu", "identity", "none")[rng.integers(3)]
        f = random_function(rng, num_intervals=int(rng.integers(2, 9)), base_kind=kind,
                            coeff_std=1.0)
        f.w_base, f.w_spline = rng.normal(), rng.normal()
        # keep away from knots, where the derivative convention is one-sided
        for x in rng.uniform(-0.99, 0.99, 10):
            _, d, _ = f.eval_grad(x)
            fd = (f(x + h) - f(x - h)) / (2 * h)
            assert abs(d - fd) / (1 + abs(d)) < 1e-6


def test_gradient_at_03():
    f = random_function(np.random.default_rng(7))
    _, d, _ = f.eval_grad(0.3)
    fd = (f(0.3 + 1e-5) - f(0.3 - 1e-5)) / 2e-5
    assert abs(d - fd) / (1 + abs(d)) < 1e-6


def test_parameter_gradient():
    rng = np.random.default_rng(1)
    f = random_function(rng)
    x = 0.37
    v, _, g = f.eval_grad(x)
    eps = 1e-6
    for i in range(len(f.coeffs)):
        c = f.coeffs.copy()
        c[i] += eps
        f2 = UnivariateFunction(f.knots, c, f.degree, f.base_kind, f.w_base, f.w_spline)
        assert abs((f2(x) - v) / eps - g.coeffs[i]) < 1e-6
    f3 = UnivariateFunction(f.knots, f.coeffs, f.degree, f.base_kind, f.w_base + eps, f.w_spline)
    assert abs((f3(x) - v) / eps - g.w_base) < 1e-6
    f4 = UnivariateFunction(f.knots, f.coeffs, f.degree, f.base_kind, f.w_base, f.w_spline + eps)
    assert abs((f4(x) - v) / eps - g.w_spline) < 1e-6


def test_from_affine_examples():
    assert from_affine(1, 0)(0.7) == pytest.approx(0.7, abs=1e-15)
    assert from_affine(0, 0)(0.3) == 0.0
    assert from_affine(-3, 0.5, (-3, 3))(2.0) == pytest.approx(-5.5, abs=1e-12)
    _, d, _ = from_affine(2, 1).eval_grad(0.2)
    assert d == pytest.approx(2.0, abs=1e-12)


def test_from_affine_sampled():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b = rng.normal(size=2)
        lo, hi = sorted(rng.uniform(-5, 5, 2))
        f = from_affine(a, b, (lo, hi))
        x = rng.uniform(lo, hi, 1000)
        assert np.max(np.abs(f(x) - (a * x + b))) < 1e-12


def test_from_relu_examples():
    f = from_relu()
    assert f(-2.0) == 0.0 and f(3.0) == 3.0 and f(0.0) == 0.0 and f(5.0) == 5.0
    assert f.eval_grad(-1.0)[1] == 0.0
    assert f.eval_grad(1.0)[1] == 1.0
    assert f.eval_grad(0.0)[1] == 0.0


def test_from_relu_exact_on_samples():
    for dom in [(-10, 10), (-3.7, 0.4), (0, 123.0)]:
        f = from_relu(dom)
        x = np.random.default_rng(0).uniform(dom[0], dom[1], 1000)
        assert np.max(np.abs(f(x) - np.maximum(x, 0))) == 0.0


def test_piecewise_linear_examples():
    assert from_piecewise_linear([0, 1], [0, 1])(0.5) == 0.5
    assert from_piecewise_linear([-1, 0, 1], [1, 0, 1])(-0.25) == pytest.approx(0.25)


def test_piecewise_linear_sine():
    xs = np.linspace(-np.pi, np.pi, 64)
    f = from_piecewise_linear(xs, np.sin(xs))
    t = np.random.default_rng(0).uniform(-np.pi, np.pi, 10_000)
    assert np.max(np.abs(f(t) - np.sin(t))) < 0.01
    assert np.max(np.abs(f(xs) - np.sin(xs))) < 1e-14


def test_piecewise_linear_errors():
    with pytest.raises(SplineError):
        from_piecewise_linear([0, 2, 1], [0, 0, 0])
    with pytest.raises(SplineError):
        from_piecewise_linear([0], [0])


def test_plus_constant_and_round_trip():
    f = random_function(np.random.default_rng(4))
    g = f.plus_constant(2.5)
    x = np.linspace(-2, 2, 50)
    assert np.max(np.abs(g(x) - f(x) - 2.5)) < 1e-12
    h = UnivariateFunction.from_dict(f.to_dict())
    assert np.array_equal(h(x), f(x))


def test_fit_function():
    f = fit_function(np.cos, -1, 1, 16)
    x = np.linspace(-1, 1, 101)
    assert np.max(np.abs(f(x) - np.cos(x))) < 1e-5


def test_config_defaults():
    c = SplineConfig()
    assert (c.degree, c.num_intervals, c.grid_range, c.base_kind) == (3, 5, (-1.0, 1.0), "silu")
    assert c.num_basis == 8
    assert SplineConfig.from_dict(c.to_dict()) == c
    with pytest.raises(SplineError):
        SplineConfig(weight_init="bogus")
