"""Closed-form Euclidean references.

In flat space a stationary curve of the order-k bending energy solves
d^{2k}/dx^{2k} gamma = 0 on every arc, so the exact minimizer is a piecewise
polynomial of degree 2k-1 obtained from one banded linear solve.  With a
tension term (k = 2) the arc ODE becomes gamma'''' = lambda * gamma'' whose
solution space is spanned by {1, x, exp(+sqrt(lambda) x), exp(-sqrt(lambda) x)}.

These solutions are used as ground truth for the gradient flow: the flow,
run to stationarity on a Euclidean problem, must land on them.
"""

from __future__ import annotations

import numpy as np

from .errors import OracleUnavailable, SingularSystem, UnsupportedOrder
from .manifolds import Euclidean

__all__ = ["PiecewisePolynomial", "ExponentialSpline", "euclidean_spline",
           "lambda_spline_ode"]


def _falling_factorial(i, j):
    """d^j/ds^j s^i evaluated coefficient: i(i-1)...(i-j+1)."""
    out = 1.0
    for r in range(j):
        out *= (i - r)
    return out


class PiecewisePolynomial:
    """Piecewise polynomial on [0, q] with unit arcs and knots at integers.

    coeffs has shape (q, d+1, n): ascending powers of the local coordinate
    s = x - (l-1) on arc l.
    """

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.ndim != 3:
            raise ValueError("coeffs must have shape (arcs, degree+1, n)")
        self.q = self.coeffs.shape[0]
        self.degree = self.coeffs.shape[1] - 1
        self.n = self.coeffs.shape[2]

    def evaluate(self, x, derivative=0):
        """Evaluate the j-th derivative at global coordinates x in [0, q].

        Interior knots evaluate on the left arc; use evaluate_arc for
        explicit one-sided values.
        """
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        xs = np.atleast_1d(x)
        arcs = np.clip(np.ceil(xs).astype(int), 1, self.q)
        out = np.empty(xs.shape + (self.n,))
        for idx in np.ndindex(xs.shape):
            l = arcs[idx]
            out[idx] = self.evaluate_arc(l, xs[idx] - (l - 1), derivative)
        return out[0] if scalar else out

    def evaluate_arc(self, l, s, derivative=0):
        """Evaluate on arc l (1-based) at local coordinate s in [0, 1]."""
        c = self.coeffs[l - 1]
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (self.n,))
        for i in range(derivative, self.degree + 1):
            fac = _falling_factorial(i, derivative)
            out += fac * np.asarray(s)[..., None] ** (i - derivative) * c[i]
        return out

    def junction_derivative_jump(self, l, j):
        """Right-minus-left j-th derivative at interior knot x_l."""
        if not 1 <= l <= self.q - 1:
            raise ValueError(f"interior knot index {l} out of range")
        left = self.evaluate_arc(l, 1.0, j)
        right = self.evaluate_arc(l + 1, 0.0, j)
        return right - left

    def sample(self, N):
        """Per-arc samples at nodes s = j/N; shape (q, N+1, n)."""
        s = np.linspace(0.0, 1.0, N + 1)
        return np.stack([self.evaluate_arc(l, s) for l in range(1, self.q + 1)])


def _check_euclidean(problem):
    if not isinstance(problem.manifold, Euclidean):
        raise OracleUnavailable(
            f"closed-form spline oracle requires a Euclidean manifold, "
            f"got {problem.manifold.kind}")


def _constraint_rows(problem, basis_at):
    """Assemble the square constraint system shared by both oracles.

    basis_at(j, s) must return the row of j-th derivatives of the per-arc
    basis functions at local coordinate s.  Returns (A, B) with A of shape
    (n_basis*q, n_basis*q) and B of shape (n_basis*q, n).
    """
    points = np.asarray(problem.points, dtype=float)
    q = points.shape[0] - 1
    n = points.shape[1]
    k = problem.k
    nb = len(basis_at(0, 0.0))
    size = nb * q
    rows_a = []
    rows_b = []

    def row(arc, j, s):
        r = np.zeros(size)
        r[nb * (arc - 1): nb * arc] = basis_at(j, s)
        return r

    # interpolation of the data at every arc end
    for l in range(1, q + 1):
        rows_a.append(row(l, 0, 0.0))
        rows_b.append(points[l - 1])
        rows_a.append(row(l, 0, 1.0))
        rows_b.append(points[l])
    # endpoint derivative clamps mu = 1..k-1
    v_start = np.asarray(problem.v_start, dtype=float)
    v_end = np.asarray(problem.v_end, dtype=float)
    for mu in range(1, k):
        rows_a.append(row(1, mu, 0.0))
        rows_b.append(v_start[mu - 1])
        rows_a.append(row(q, mu, 1.0))
        rows_b.append(v_end[mu - 1])
    # C^{2k-2} matching at interior knots
    for l in range(1, q):
        for j in range(1, 2 * k - 1):
            rows_a.append(row(l, j, 1.0) - row(l + 1, j, 0.0))
            rows_b.append(np.zeros(n))
    return np.array(rows_a), np.array(rows_b)


def euclidean_spline(problem):
    """Exact flat-space spline: per-arc degree-(2k-1) polynomial solve.

    Constraint set: values at every knot, derivative clamps of order
    mu <= k-1 at the two outer endpoints, and C^{2k-2} matching at the
    interior knots -- a square system of 2kq conditions per coordinate.
    """
    _check_euclidean(problem)
    if problem.lam != 0.0:
        raise OracleUnavailable(
            "polynomial oracle requires lambda = 0; use lambda_spline_ode")
    k = problem.k
    q = np.asarray(problem.points).shape[0] - 1
    n = np.asarray(problem.points).shape[1]

    def basis_at(j, s):
        return np.array([_falling_factorial(i, j) * s ** max(i - j, 0)
                         if i >= j else 0.0 for i in range(2 * k)])

    a, b = _constraint_rows(problem, basis_at)
    try:
        coeffs = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"spline system singular: {exc}")
    residual = np.max(np.abs(a @ coeffs - b))
    if residual > 1e-10 * max(1.0, np.max(np.abs(b))):
        raise SingularSystem(
            f"spline solve residual {residual:.3e} exceeds tolerance")
    return PiecewisePolynomial(coeffs.reshape(q, 2 * k, n))


# --- tension splines (k = 2, lambda > 0) --------------------------------------
#
# gamma'''' = lambda * gamma'' per arc.  The textbook basis
# {1, x, e^{zx}, e^{-zx}} (z = sqrt(lambda)) degenerates numerically as
# lambda -> 0, so we work in the equivalent well-conditioned basis
#   {1, s, phi2, phi3},  phi2 = (cosh(zs)-1)/z^2,  phi3 = (sinh(zs)-zs)/z^3,
# which limits smoothly to {1, s, s^2/2, s^3/6}.


def _phi2(z, s):
    u = z * s
    if abs(z) < 1e-6:
        return s * s / 2.0 * (1.0 + u * u / 12.0)
    return 2.0 * np.sinh(u / 2.0) ** 2 / z**2


def _phi3(z, s):
    u = z * s
    if abs(u) < 1e-3:
        return s**3 / 6.0 * (1.0 + u * u / 20.0 + u**4 / 840.0)
    return (np.sinh(u) - u) / z**3


def _psi1(z, s):
    # first derivative of phi2: sinh(zs)/z (-> s as z -> 0)
    u = z * s
    if abs(z) < 1e-6:
        return s * (1.0 + u * u / 6.0)
    return np.sinh(u) / z


def _exp_basis_at(z, j, s):
    """j-th derivative row of the regularized tension basis {1, s, phi2, phi3}."""
    if j == 0:
        return np.array([1.0, s, _phi2(z, s), _phi3(z, s)])
    if j == 1:
        return np.array([0.0, 1.0, _psi1(z, s), _phi2(z, s)])
    if j == 2:
        return np.array([0.0, 0.0, np.cosh(z * s), _psi1(z, s)])
    if j == 3:
        return np.array([0.0, 0.0, z * np.sinh(z * s), np.cosh(z * s)])
    # higher derivatives repeat with z^2 factors: d^2/ds^2 maps the
    # hyperbolic pair to z^2 * (previous pair)
    lower = _exp_basis_at(z, j - 2, s)
    return np.array([0.0, 0.0, z * z * lower[2], z * z * lower[3]])


class ExponentialSpline:
    """Tension-spline solution, evaluable like the polynomial oracle."""

    def __init__(self, z, coeffs):
        self.z = float(z)
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.q = self.coeffs.shape[0]
        self.n = self.coeffs.shape[2]

    def evaluate_arc(self, l, s, derivative=0):
        c = self.coeffs[l - 1]
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (self.n,))
        flat = out.reshape(-1, self.n)
        for i, si in enumerate(np.atleast_1d(s).ravel()):
            flat[i] = _exp_basis_at(self.z, derivative, float(si)) @ c
        return out

    def evaluate(self, x, derivative=0):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        xs = np.atleast_1d(x)
        arcs = np.clip(np.ceil(xs).astype(int), 1, self.q)
        out = np.empty(xs.shape + (self.n,))
        for idx in np.ndindex(xs.shape):
            l = arcs[idx]
            out[idx] = self.evaluate_arc(l, xs[idx] - (l - 1), derivative)
        return out[0] if scalar else out

    def sample(self, N):
        s = np.linspace(0.0, 1.0, N + 1)
        return np.stack([self.evaluate_arc(l, s) for l in range(1, self.q + 1)])


def lambda_spline_ode(problem):
    """Tension-spline reference for k = 2, lambda > 0 in flat space."""
    _check_euclidean(problem)
    if problem.k != 2:
        raise UnsupportedOrder(
            f"tension-spline ODE solve supports k = 2 only, got k = {problem.k}")
    if problem.lam <= 0.0:
        raise ValueError("lambda_spline_ode requires lambda > 0")
    z = np.sqrt(problem.lam)
    points = np.asarray(problem.points, dtype=float)
    q, n = points.shape[0] - 1, points.shape[1]

    a, b = _constraint_rows(problem, lambda j, s: _exp_basis_at(z, j, s))
    try:
        coeffs = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"tension-spline system singular: {exc}")
    residual = np.max(np.abs(a @ coeffs - b))
    if residual > 1e-10 * max(1.0, np.max(np.abs(b))):
        raise SingularSystem(
            f"tension-spline residual {residual:.3e} exceeds tolerance")
    return ExponentialSpline(z, coeffs.reshape(q, 4, n))
