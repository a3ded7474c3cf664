"""Closed-form reference solutions: hand-derivable cases, frozen golden
values, and structural invariants of the piecewise solves."""

import numpy as np
import pytest

from splineflow.errors import OracleUnavailable, UnsupportedOrder
from splineflow.manifolds import Euclidean, Sphere
from splineflow.netstate import InterpolationProblem
from splineflow.oracle import euclidean_spline, lambda_spline_ode


def line_problem(k=2, lam=0.0):
    return InterpolationProblem(Euclidean(1), [[0.0], [1.0]], k, lam,
                                v_start=[[1.0]], v_end=[[1.0]])


def symmetric_problem(k):
    # p = 0, 1, 0 with all derivative clamps zero at both ends
    return InterpolationProblem(Euclidean(1), [[0.0], [1.0], [0.0]], k)


def test_straight_line_data_gives_linear_coefficients():
    spline = euclidean_spline(line_problem())
    np.testing.assert_allclose(spline.coeffs[0, :, 0], [0.0, 1.0, 0.0, 0.0],
                               atol=1e-12)


def test_symmetric_two_arc_midpoint_golden():
    spline = euclidean_spline(symmetric_problem(2))
    # frozen from the direct solve; equals the hand value of -2s^3+3s^2 at 1/2
    assert abs(spline.evaluate(0.5)[0] - 0.5) < 1e-12
    np.testing.assert_allclose(spline.coeffs[0, :, 0], [0.0, 0.0, 3.0, -2.0],
                               atol=1e-12)


def test_symmetric_two_arc_k3_midpoint_hand_value():
    # quintic with gamma(0)=gamma'(0)=gamma''(0)=0, gamma(1)=1 and odd
    # derivatives vanishing at the symmetry point: 19/48 at s = 1/2
    spline = euclidean_spline(symmetric_problem(3))
    assert abs(spline.evaluate(0.5)[0] - 19.0 / 48.0) < 1e-12


@pytest.mark.parametrize("k", [2, 3, 4])
def test_top_derivative_vanishes_per_arc(k):
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((4, 2))
    problem = InterpolationProblem(Euclidean(2), pts, k)
    spline = euclidean_spline(problem)
    s = np.linspace(0, 1, 7)
    for l in range(1, problem.q + 1):
        top = spline.evaluate_arc(l, s, derivative=2 * k)
        assert np.max(np.abs(top)) == 0.0


@pytest.mark.parametrize("k", [2, 3])
def test_smoothness_and_interpolation(k):
    rng = np.random.default_rng(6)
    pts = rng.standard_normal((5, 3))
    vs = rng.standard_normal((k - 1, 3))
    ve = rng.standard_normal((k - 1, 3))
    problem = InterpolationProblem(Euclidean(3), pts, k, v_start=vs, v_end=ve)
    spline = euclidean_spline(problem)
    for l, p in enumerate(pts):
        np.testing.assert_allclose(spline.evaluate(float(l)), p, atol=1e-9)
    for mu, v in enumerate(vs, start=1):
        np.testing.assert_allclose(spline.evaluate_arc(1, 0.0, mu), v,
                                   atol=1e-9)
    for mu, v in enumerate(ve, start=1):
        np.testing.assert_allclose(spline.evaluate_arc(problem.q, 1.0, mu), v,
                                   atol=1e-9)
    for l in range(1, problem.q):
        for j in range(1, 2 * k - 1):
            jump = spline.junction_derivative_jump(l, j)
            assert np.max(np.abs(jump)) < 1e-9


def test_top_jump_is_generally_nonzero():
    # the square constraint system leaves the order-(2k-1) jump free; the
    # symmetric fixture has a known value of 24
    spline = euclidean_spline(symmetric_problem(2))
    jump = spline.junction_derivative_jump(1, 3)
    np.testing.assert_allclose(jump, [24.0], atol=1e-9)


def test_oracle_requires_euclidean():
    p = InterpolationProblem(Sphere(2), [[1.0, 0, 0], [0, 1.0, 0]], 2)
    with pytest.raises(OracleUnavailable):
        euclidean_spline(p)


def test_oracle_requires_zero_tension():
    with pytest.raises(OracleUnavailable):
        euclidean_spline(line_problem(lam=1.0))


# --- tension splines ---------------------------------------------------------


def test_tension_spline_golden_midpoint():
    problem = InterpolationProblem(Euclidean(1), [[0.0], [1.0]], 2, 1.0,
                                   v_start=[[1.0]], v_end=[[0.0]])
    curve = lambda_spline_ode(problem)
    # frozen from the raw-exponential-basis solve
    assert abs(curve.evaluate(0.5)[0] - 0.622459331201854) < 1e-12


def test_tension_spline_straight_line_any_lambda():
    for lam in (1e-6, 1.0, 25.0):
        curve = lambda_spline_ode(line_problem(lam=lam))
        s = np.linspace(0, 1, 9)
        np.testing.assert_allclose(curve.evaluate_arc(1, s)[:, 0], s,
                                   atol=1e-10)


def test_tension_spline_small_lambda_limit():
    rng = np.random.default_rng(8)
    pts = rng.standard_normal((4, 2))
    base = InterpolationProblem(Euclidean(2), pts, 2)
    tense = InterpolationProblem(Euclidean(2), pts, 2, 1e-8)
    poly = euclidean_spline(base)
    curve = lambda_spline_ode(tense)
    xs = np.linspace(0.0, 3.0, 31)
    assert np.max(np.abs(poly.evaluate(xs) - curve.evaluate(xs))) < 1e-6


def test_tension_spline_matching_at_junctions():
    rng = np.random.default_rng(9)
    pts = rng.standard_normal((4, 2))
    curve = lambda_spline_ode(InterpolationProblem(Euclidean(2), pts, 2, 2.0))
    for l in range(1, 3):
        for j in range(3):
            left = curve.evaluate_arc(l, 1.0, j)
            right = curve.evaluate_arc(l + 1, 0.0, j)
            np.testing.assert_allclose(left, right, atol=1e-9)


def test_tension_spline_rejects_higher_order():
    problem = InterpolationProblem(Euclidean(1), [[0.0], [1.0]], 3, 1.0)
    with pytest.raises(UnsupportedOrder):
        lambda_spline_ode(problem)


def test_tension_spline_solves_the_arc_ode():
    # gamma'''' = lambda * gamma'' pointwise, via 4th-order finite differences
    lam = 3.0
    problem = InterpolationProblem(Euclidean(1), [[0.0], [2.0]], 2, lam,
                                   v_start=[[0.5]], v_end=[[-1.0]])
    curve = lambda_spline_ode(problem)
    s = np.linspace(0.2, 0.8, 13)
    g2 = curve.evaluate_arc(1, s, 2)
    g4 = curve.evaluate_arc(1, s, 4)
    np.testing.assert_allclose(g4, lam * g2, atol=1e-9)
