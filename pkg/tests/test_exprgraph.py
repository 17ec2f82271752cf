import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpgdrive import exprgraph as eg


def test_square_value():
    g = eg.ExprGraph()
    x = g.var("x")
    assert eg.eval(g, {"x": 3.0}, output=x**2) == 9.0


def test_plus_part_zero_branch():
    g = eg.ExprGraph()
    x = g.var("x")
    assert eg.eval(g, {"x": -2.0}, output=eg.plus(x)) == 0.0


def test_sin_cos_against_multiprecision():
    g = eg.ExprGraph()
    x = g.var("x")
    got = eg.eval(g, {"x": 0.7}, output=eg.sin(x) * eg.cos(x))
    mpmath.mp.dps = 40
    want = float(mpmath.sin(mpmath.mpf("0.7")) * mpmath.cos(mpmath.mpf("0.7")))
    assert abs(got - want) <= 1e-12


def test_square_gradient():
    g = eg.ExprGraph()
    x = g.var("x")
    grad = eg.gradient(g, {"x": 3.0}, ["x"], output=x**2)
    assert grad.tolist() == [6.0]


def test_plus_part_inactive_gradient():
    g = eg.ExprGraph()
    x = g.var("x")
    grad = eg.gradient(g, {"x": -1.0}, ["x"], output=eg.plus(x) ** 2)
    assert grad.tolist() == [0.0]


def _random_graph_and_point(seed, n_vars=4):
    """A random smooth expression mixing every differentiable operator."""
    rng = np.random.default_rng(seed)
    g = eg.ExprGraph()
    xs = [g.var(f"x{i}") for i in range(n_vars)]
    pool = list(xs)
    for _ in range(25):
        a = pool[rng.integers(len(pool))]
        b = pool[rng.integers(len(pool))]
        op = rng.integers(8)
        if op == 0:
            e = a + b
        elif op == 1:
            e = a - b
        elif op == 2:
            e = a * b
        elif op == 3:
            e = a / (b * b + 2.0)
        elif op == 4:
            e = eg.sin(a) * eg.cos(b)
        elif op == 5:
            e = eg.atan(a) + eg.exp(a * 0.3)
        elif op == 6:
            e = eg.tan(a * 0.2)
        else:
            e = eg.wsq(a, 0.7) + b**3
        pool.append(e)
    out = pool[-1] + pool[-2]
    point = {f"x{i}": float(v) for i, v in enumerate(rng.uniform(-1.2, 1.2, n_vars))}
    return g, out, point


@pytest.mark.parametrize("seed", range(12))
def test_gradient_matches_central_differences(seed):
    g, out, point = _random_graph_and_point(seed)
    assert eg.check_gradient(g, point, output=out) <= 1e-6


def test_gradient_all_operators_many_points():
    worst = 0.0
    for seed in range(100):
        g, out, point = _random_graph_and_point(seed, n_vars=3)
        worst = max(worst, eg.check_gradient(g, point, output=out))
    assert worst <= 1e-6


def test_check_gradient_quadratic_is_exact():
    g = eg.ExprGraph()
    x, y = g.var("x"), g.var("y")
    quad = 2.0 * x**2 + x * y + 0.5 * y**2 - 3.0 * x
    assert eg.check_gradient(g, {"x": 0.7, "y": -1.3}, output=quad) <= 1e-10


def test_gradient_linearity():
    g = eg.ExprGraph()
    x, y = g.var("x"), g.var("y")
    f = eg.sin(x) * y
    h = eg.exp(x - y)
    alpha, beta = 2.5, -1.25
    combo = alpha * f + beta * h
    point = {"x": 0.4, "y": 0.9}
    gf = eg.gradient(g, point, ["x", "y"], output=f)
    gh = eg.gradient(g, point, ["x", "y"], output=h)
    gc = eg.gradient(g, point, ["x", "y"], output=combo)
    assert np.max(np.abs(gc - (alpha * gf + beta * gh))) <= 1e-12


def test_eval_and_gradient_deterministic():
    g, out, point = _random_graph_and_point(3)
    v1 = eg.eval(g, point, output=out)
    v2 = eg.eval(g, point, output=out)
    g1 = eg.gradient(g, point, list(point), output=out)
    g2 = eg.gradient(g, point, list(point), output=out)
    assert v1 == v2
    assert np.array_equal(g1, g2)


def test_unbound_variable_rejected():
    g = eg.ExprGraph()
    x = g.var("x")
    g.var("y")
    with pytest.raises(eg.GraphConfigError):
        eg.eval(g, {"x": 1.0}, output=x)


def test_unknown_variable_rejected():
    g = eg.ExprGraph()
    x = g.var("x")
    with pytest.raises(eg.GraphConfigError):
        eg.eval(g, {"x": 1.0, "zz": 2.0}, output=x)


def test_non_finite_value_reported():
    g = eg.ExprGraph()
    x = g.var("x")
    with pytest.raises(eg.NumericError):
        eg.eval(g, {"x": 0.0}, output=1.0 / x)


def test_large_graph_within_latency():
    import time

    g = eg.ExprGraph()
    xs = [g.var(f"x{i}") for i in range(50)]
    e = xs[0]
    nodes = list(xs)
    i = 0
    while g.num_nodes < 50_000:
        a = nodes[i % len(nodes)]
        b = nodes[(i * 7 + 3) % len(nodes)]
        e = eg.sin(a * 0.01) + e * 0.999 + a * b * 1e-4
        nodes.append(e)
        i += 1
    point = {f"x{i}": 0.01 * i for i in range(50)}
    x = g.pack(point)
    ev = eg.Evaluator(g)
    ev.value_and_grad(x, e.node)  # compile path warm
    t0 = time.perf_counter()
    for _ in range(10):
        ev.value_and_grad(x, e.node)
    per_call = (time.perf_counter() - t0) / 10
    assert g.num_nodes >= 50_000
    assert per_call < 0.05  # well inside a 0.2 s control period


def test_symbolic_gradient_matches_numeric():
    g, out, point = _random_graph_and_point(7)
    names = list(point)
    sym = g.grad_exprs(out, [g.var(n) for n in names])
    numeric = eg.gradient(g, point, names, output=out)
    for e, v in zip(sym, numeric):
        assert abs(eg.eval(g, point, output=e) - v) <= 1e-12


@given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
@settings(max_examples=60, deadline=None)
def test_weighted_sq_norm_matches_definition(a, b):
    g = eg.ExprGraph()
    x, y = g.var("x"), g.var("y")
    e = eg.weighted_sq_norm([x, y], [2.0, 0.5])
    got = eg.eval(g, {"x": a, "y": b}, output=e)
    assert math.isclose(got, 2.0 * a * a + 0.5 * b * b, rel_tol=0, abs_tol=1e-12)
