import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PROPERTY_CASES
from gbsde.errors import ConfigError, InvalidInputError
from gbsde.gcore import (
    GammaSet,
    GFunction,
    OneStepMeasure,
    QuadratureRule,
    discretize_gamma,
    eval_G,
    one_step_sup_expectation,
)

G14 = GFunction(GammaSet.interval(1.0, 4.0))
R7 = QuadratureRule(7, 1)
FINITE2 = GammaSet.finite([[[1.0, 0.2], [0.2, 2.0]], [[3.0, -0.5], [-0.5, 1.0]], [[2.0, 0.0], [0.0, 2.0]]])


def brute_G(a: float, lo=1.0, hi=4.0, points=1000) -> float:
    return max(0.5 * g * a for g in np.linspace(lo, hi, points))


@pytest.mark.parametrize("a, expected", [(2.0, 4.0), (0.0, 0.0), (-2.0, -1.0)])
def test_eval_G_examples(a, expected):
    assert eval_G(G14, [[a]]) == pytest.approx(brute_G(a), abs=1e-12)
    assert eval_G(G14, [[a]]) == pytest.approx(expected, abs=1e-12)


def test_eval_G_zero_for_any_set():
    assert eval_G(GFunction(FINITE2), np.zeros((2, 2))) == 0.0


def test_eval_G_rejects_bad_shapes():
    with pytest.raises(InvalidInputError):
        eval_G(G14, np.eye(2))
    with pytest.raises(InvalidInputError):
        eval_G(GFunction(FINITE2), [[1.0, 2.0], [0.0, 1.0]])


def test_gamma_set_validation():
    with pytest.raises(ConfigError):
        GammaSet.interval(0.0, 1.0)
    with pytest.raises(ConfigError):
        GammaSet.interval(2.0, 1.0)
    with pytest.raises(ConfigError):
        GammaSet.finite([[[1.0, 2.0], [0.0, 1.0]]])
    with pytest.raises(ConfigError):
        GammaSet.finite([[[1.0, 0.0], [0.0, 0.0]]])


def test_discretize_interval():
    out = discretize_gamma(GammaSet.interval(1.0, 4.0), 4)
    assert out[:, 0, 0].tolist() == [1.0, 2.0, 3.0, 4.0]


def test_discretize_finite_passthrough():
    mats = [[[1.0]], [[3.0]]]
    out = discretize_gamma(GammaSet.finite(mats), 10)
    assert out[:, 0, 0].tolist() == [1.0, 3.0]


def test_discretize_degenerate_interval_collapses():
    out = discretize_gamma(GammaSet.interval(2.0, 2.0), 2)
    assert out[:, 0, 0].tolist() == [2.0]


def test_quadrature_rule_moments():
    for d in (1, 2):
        rule = QuadratureRule(7, d)
        assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
        cov = np.einsum("q,qi,qj->ij", rule.weights, rule.points, rule.points)
        np.testing.assert_allclose(cov, np.eye(d), atol=1e-13)


def test_one_step_measure_covariance():
    gamma = np.array([[2.0, 0.3], [0.3, 1.0]])
    meas = OneStepMeasure(gamma, 0.1, QuadratureRule(5, 2))
    np.testing.assert_allclose(meas.covariance(), 0.1 * gamma, atol=1e-14)


def test_sup_expectation_of_square():
    gammas = discretize_gamma(GammaSet.interval(1.0, 4.0), 9)
    val, arg = one_step_sup_expectation(lambda w: w[:, 0] ** 2, 0.1, R7, gammas)
    assert val == pytest.approx(0.4, abs=1e-14)
    assert arg[0, 0] == 4.0


def test_sup_expectation_of_negative_square():
    gammas = discretize_gamma(GammaSet.interval(1.0, 4.0), 9)
    val, arg = one_step_sup_expectation(lambda w: -w[:, 0] ** 2, 0.1, R7, gammas)
    assert val == pytest.approx(-0.1, abs=1e-14)
    assert arg[0, 0] == 1.0


@pytest.mark.parametrize("dt", [0.01, 0.5, 2.0])
def test_sup_expectation_of_linear_is_zero(dt):
    gammas = discretize_gamma(GammaSet.interval(1.0, 4.0), 9)
    val, _ = one_step_sup_expectation(lambda w: w[:, 0], dt, R7, gammas)
    assert val == pytest.approx(0.0, abs=1e-14)


def test_sup_expectation_rejects_nonpositive_dt():
    with pytest.raises(InvalidInputError):
        one_step_sup_expectation(lambda w: w[:, 0], 0.0, R7, discretize_gamma(GammaSet.interval(1.0, 4.0)))


def _interior_max(w):
    return w[:, 0] ** 2 - w[:, 0] ** 4


def test_refining_interval_grid_is_monotone_and_cauchy():
    # nested grids m -> 2m - 1 keep every earlier point; the maximizer
    # gamma* = 1 / (6 dt) is interior so the sup is not hit exactly
    gamma = GammaSet.interval(1.0, 4.0)
    values = []
    m = 9
    while m <= 1025:
        values.append(one_step_sup_expectation(_interior_max, 0.1, R7, discretize_gamma(gamma, m))[0])
        m = 2 * m - 1
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[-1] - values[-2] < 1e-6


# ------------------------------------------------------------- properties

sym1 = st.floats(-50, 50, allow_nan=False)


def sym2():
    return st.tuples(sym1, sym1, sym1).map(lambda t: np.array([[t[0], t[1]], [t[1], t[2]]]))


def psd2():
    return st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3)).map(
        lambda t: np.array([[t[0], t[1]], [t[2], t[3]]]) @ np.array([[t[0], t[1]], [t[2], t[3]]]).T
    )


CASES = [
    (GFunction(GammaSet.interval(1.0, 4.0)), 1),
    (GFunction(GammaSet.interval(0.25, 0.25)), 1),
    (GFunction(FINITE2), 2),
]


def _tol(*mats):
    return 1e-12 * max(1.0, *(float(np.abs(m).max()) for m in mats))


@settings(max_examples=PROPERTY_CASES)
@given(A=sym2(), P=psd2(), which=st.sampled_from([0, 1, 2]))
def test_G_monotone_and_nondegenerate(A, P, which):
    gf, d = CASES[which]
    A = A[:d, :d]
    P = P[:d, :d]
    B = A - P
    gap = eval_G(gf, A) - eval_G(gf, B)
    tol = _tol(A, B)
    assert gap >= -tol
    assert gap >= 0.5 * gf.gamma.floor * np.trace(A - B) - tol


@settings(max_examples=PROPERTY_CASES)
@given(A=sym2(), B=sym2(), lam=st.floats(0, 100), which=st.sampled_from([0, 1, 2]))
def test_G_sublinear_and_homogeneous(A, B, lam, which):
    gf, d = CASES[which]
    A, B = A[:d, :d], B[:d, :d]
    tol = _tol(A, B) * (1 + lam)
    assert eval_G(gf, A + B) <= eval_G(gf, A) + eval_G(gf, B) + tol
    assert eval_G(gf, lam * A) == pytest.approx(lam * eval_G(gf, A), abs=tol)


@settings(max_examples=PROPERTY_CASES)
@given(A=sym2(), which=st.sampled_from([0, 2]))
def test_G_batch_matches_scalar(A, which):
    gf, d = CASES[which]
    A = A[:d, :d]
    assert gf.batch(A[None])[0] == pytest.approx(eval_G(gf, A), abs=_tol(A))


coeffs = st.lists(st.floats(-5, 5, allow_nan=False), min_size=5, max_size=5)


def _v(c):
    def v(w):
        x = w[:, 0] if w.shape[1] == 1 else w[:, 0] + 0.5 * w[:, 1]
        return c[0] + c[1] * x + c[2] * x**2 + c[3] * np.abs(x) + c[4] * np.sin(3 * x)

    return v


SETS = [
    discretize_gamma(GammaSet.interval(1.0, 4.0), 9),
    discretize_gamma(FINITE2),
]
RULES = [R7, QuadratureRule(5, 2)]


@settings(max_examples=PROPERTY_CASES)
@given(c1=coeffs, c2=coeffs, lam=st.floats(0, 20), dt=st.floats(0.001, 1.0), which=st.sampled_from([0, 1]))
def test_sup_expectation_subadditive_and_homogeneous(c1, c2, lam, dt, which):
    gammas, rule = SETS[which], RULES[which]
    v1, v2 = _v(c1), _v(c2)
    a = one_step_sup_expectation(v1, dt, rule, gammas)[0]
    b = one_step_sup_expectation(v2, dt, rule, gammas)[0]
    ab = one_step_sup_expectation(lambda w: v1(w) + v2(w), dt, rule, gammas)[0]
    tol = 1e-11 * (1 + abs(a) + abs(b))
    assert ab <= a + b + tol
    scaled = one_step_sup_expectation(lambda w: lam * v1(w), dt, rule, gammas)[0]
    assert scaled == pytest.approx(lam * a, abs=tol * (1 + lam))


@settings(max_examples=PROPERTY_CASES)
@given(c=coeffs, dt=st.floats(0.001, 1.0), which=st.sampled_from([0, 1]))
def test_sup_dominates_every_member(c, dt, which):
    gammas, rule = SETS[which], RULES[which]
    v = _v(c)
    top = one_step_sup_expectation(v, dt, rule, gammas)[0]
    for g in gammas:
        meas = OneStepMeasure(g, dt, rule)
        assert top >= meas.expectation(v(meas.increments)) - 1e-12 * (1 + abs(top))


@settings(max_examples=PROPERTY_CASES)
@given(A=sym2(), dt=st.floats(0.001, 2.0), which=st.sampled_from([0, 1]))
def test_quadratic_sup_is_twice_G(A, dt, which):
    gammas, rule = SETS[which], RULES[which]
    d = rule.dim
    A = A[:d, :d]
    gf = GFunction(GammaSet.finite(gammas))
    val = one_step_sup_expectation(lambda w: np.einsum("qi,ij,qj->q", w, A, w), dt, rule, gammas)[0]
    assert val == pytest.approx(2 * eval_G(gf, A) * dt, abs=1e-11 * (1 + np.abs(A).max()))
