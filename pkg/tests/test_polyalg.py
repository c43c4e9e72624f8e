import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shieldrl.errors import DimensionError
from shieldrl.polyalg import (
    CompiledMap,
    Polynomial,
    PolynomialMap,
    finite_difference_jacobian,
    poly_compose_affine,
    poly_eval,
    poly_jacobian,
    smooth_cos,
    smooth_sin,
    taylor_expand,
)


def random_poly(rng, dim, degree, n_terms=6):
    terms = {}
    for _ in range(n_terms):
        alpha = tuple(int(e) for e in rng.integers(0, degree + 1, size=dim))
        if sum(alpha) > degree:
            continue
        terms[alpha] = float(rng.normal())
    return Polynomial(dim, terms)


def test_eval_constant():
    p = Polynomial.constant(3, 3.0)
    assert poly_eval(p, [1.0, -2.0, 7.0]) == 3.0


def test_eval_monomial():
    # x1^2 * x2 at (2, 3)
    p = Polynomial(2, {(2, 1): 1.0})
    assert poly_eval(p, [2.0, 3.0]) == 12.0


def test_eval_zero_poly():
    p = Polynomial.zero(4)
    assert poly_eval(p, [1.0, 2.0, 3.0, 4.0]) == 0.0
    assert p.degree() == 0


def test_eval_dimension_mismatch():
    p = Polynomial.variable(2, 0)
    with pytest.raises(DimensionError):
        poly_eval(p, [1.0, 2.0, 3.0])


def test_difference_of_squares():
    x = Polynomial.variable(1, 0)
    prod = (x + 1.0).mul(x - 1.0)
    assert prod.terms == {(2,): 1.0, (0,): -1.0}


def test_add_zero_identity():
    rng = np.random.default_rng(0)
    p = random_poly(rng, 3, 4)
    assert (p + Polynomial.zero(3)).terms == p.terms


def test_compose_affine_translation_binomial():
    # x^2 under x -> x + c gives x^2 + 2 c x + c^2
    c = 1.7
    p = Polynomial(1, {(2,): 1.0})
    q = poly_compose_affine(p, np.eye(1), np.array([c]))
    assert q.coefficient((2,)) == pytest.approx(1.0)
    assert q.coefficient((1,)) == pytest.approx(2 * c)
    assert q.coefficient((0,)) == pytest.approx(c * c)


def test_compose_affine_general_matches_eval():
    rng = np.random.default_rng(1)
    p = random_poly(rng, 3, 3)
    M = rng.normal(size=(3, 2))
    v = rng.normal(size=3)
    q = p.compose_affine(M, v)
    for _ in range(20):
        x = rng.normal(size=2)
        assert q.evaluate(x) == pytest.approx(p.evaluate(M @ x + v), rel=1e-10, abs=1e-10)


def test_degree_rules():
    rng = np.random.default_rng(2)
    a = random_poly(rng, 2, 3)
    b = random_poly(rng, 2, 4)
    if not a.is_zero() and not b.is_zero():
        assert a.mul(b).degree() == a.degree() + b.degree()
    assert (a + b).degree() <= max(a.degree(), b.degree())


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_ring_axioms_random(seed):
    rng = np.random.default_rng(seed)
    a = random_poly(rng, 3, 3)
    b = random_poly(rng, 3, 3)
    x = rng.uniform(-1.5, 1.5, size=3)
    lhs_mul = a.mul(b).evaluate(x)
    rhs_mul = a.evaluate(x) * b.evaluate(x)
    assert lhs_mul == pytest.approx(rhs_mul, rel=1e-10, abs=1e-10)
    lhs_add = (a + b).evaluate(x)
    assert lhs_add == pytest.approx(a.evaluate(x) + b.evaluate(x), rel=1e-10, abs=1e-10)


def test_ring_axioms_bulk():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        a = random_poly(rng, 2, 3, n_terms=4)
        b = random_poly(rng, 2, 3, n_terms=4)
        x = rng.uniform(-1.0, 1.0, size=2)
        assert a.mul(b).evaluate(x) == pytest.approx(
            a.evaluate(x) * b.evaluate(x), rel=1e-10, abs=1e-12)
        assert (a + b).evaluate(x) == pytest.approx(
            a.evaluate(x) + b.evaluate(x), rel=1e-10, abs=1e-12)


def test_jacobian_identity_map():
    f = PolynomialMap([Polynomial.variable(3, i) for i in range(3)])
    np.testing.assert_allclose(poly_jacobian(f, np.zeros(3)), np.eye(3))


def test_jacobian_product_rule():
    f = PolynomialMap([Polynomial(2, {(1, 1): 1.0})])
    np.testing.assert_allclose(poly_jacobian(f, np.array([2.0, 3.0])), [[3.0, 2.0]])


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    comps = [random_poly(rng, 3, 4) for _ in range(2)]
    f = PolynomialMap(comps)
    for _ in range(10):
        x = rng.uniform(-0.8, 0.8, size=3)
        J = poly_jacobian(f, x)
        J_fd = finite_difference_jacobian(f.evaluate, x, step=1e-5)
        np.testing.assert_allclose(J, J_fd, rtol=1e-5, atol=1e-7)


def test_compiled_map_matches_symbolic():
    rng = np.random.default_rng(5)
    f = PolynomialMap([random_poly(rng, 4, 5, n_terms=12) for _ in range(3)])
    cm = CompiledMap(f)
    X = rng.uniform(-1.0, 1.0, size=(7, 4))
    for x in X:
        np.testing.assert_allclose(cm(x), f.evaluate(x), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(cm.jacobian(x), f.jacobian(x), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(cm.batch(X), np.array([f.evaluate(x) for x in X]),
                               rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(cm.jacobian_batch(X),
                               np.array([f.jacobian(x) for x in X]),
                               rtol=1e-12, atol=1e-12)


def test_taylor_polynomial_fixed_point():
    rng = np.random.default_rng(6)
    f = PolynomialMap([random_poly(rng, 2, 3), random_poly(rng, 2, 3)])
    center = rng.normal(size=2)

    def evaluator(z):
        return [sum(c * (z[0] ** a[0]) * (z[1] ** a[1]) for a, c in p.terms.items())
                for p in f.components]

    t = taylor_expand(evaluator, center, degree=4)
    for _ in range(25):
        x = rng.uniform(-1.0, 1.0, size=2)
        np.testing.assert_allclose(t.evaluate(x - center), f.evaluate(x), atol=1e-12)


def test_taylor_sin_series():
    t = taylor_expand(lambda z: [smooth_sin(z[0])], np.zeros(1), degree=5)
    p = t.components[0]
    assert p.coefficient((1,)) == pytest.approx(1.0)
    assert p.coefficient((3,)) == pytest.approx(-1.0 / 6.0)
    assert p.coefficient((5,)) == pytest.approx(1.0 / 120.0)
    assert p.coefficient((0,)) == 0.0
    assert p.coefficient((2,)) == 0.0
    assert p.coefficient((4,)) == 0.0


def test_taylor_trig_composite_accuracy():
    # degree-5 expansion of a smooth composite is accurate near the center
    def evaluator(z):
        return [smooth_sin(z[0]) * smooth_cos(z[1]) / (2.0 + smooth_sin(z[1]))]

    center = np.array([0.3, -0.2])
    t = taylor_expand(evaluator, center, degree=5)
    rng = np.random.default_rng(7)
    for _ in range(30):
        d = rng.uniform(-0.01, 0.01, size=2)
        truth = math.sin(center[0] + d[0]) * math.cos(center[1] + d[1]) / (
            2.0 + math.sin(center[1] + d[1]))
        assert t.evaluate(d)[0] == pytest.approx(truth, abs=1e-10)
