"""Discrete differential operators on arc grids.

Finite-difference partial derivatives come from Fornberg weight tables; the
covariant derivative of a tangent field V along gamma is the recursion

    D_x V = d_x V - Pi(V, d_x gamma),

iterated to any order.  Two assemblies of the stationarity operator are
provided: the intrinsic one built from covariant derivative fields, and the
extrinsic one built from raw partial derivatives plus correction fields
W_i = D_x^i d_x gamma - d_x^{i+1} gamma generated by their own recursion.
The two agree up to stencil error and serve as mutual cross-checks.
"""

from __future__ import annotations

import numpy as np

from .errors import GridTooCoarse

__all__ = ["StencilSet", "EnergyBreakdown", "covariant_derivative",
           "covariant_derivative_of_field", "w_correction", "euler_lagrange",
           "extrinsic_rhs_gamma", "energy", "first_variation",
           "gradient_check", "random_admissible_direction", "trapezoid"]


# --- stencils ---------------------------------------------------------------------


def fornberg_weights(z, x, m):
    """Finite-difference weights for derivatives 0..m at z on nodes x.

    Returns an array (len(x), m+1); column v holds the weights of the v-th
    derivative.  Standard recursion, exact for polynomials of degree
    <= len(x)-1.
    """
    x = np.asarray(x)
    n = len(x)
    c = np.zeros((n, m + 1), dtype=x.dtype)
    c1 = x.dtype.type(1.0)
    c4 = x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for v in range(mn, 0, -1):
                    c[i, v] = c1 * (v * c[i - 1, v - 1] - c5 * c[i - 1, v]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for v in range(mn, 0, -1):
                c[j, v] = (c4 * c[j, v] - v * c[j, v - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


class StencilSet:
    """Differentiation matrices of a fixed accuracy order on unit arcs.

    Interior rows use symmetric windows (odd derivatives: j+a points, even
    derivatives: j+a-1, where symmetry buys one extra order); rows near the
    arc ends shift to one-sided windows of j+a points.  Every row therefore
    reproduces monomials x^m exactly for m <= a + j - 1 at its own node.
    """

    def __init__(self, a=4):
        if a < 2 or a % 2:
            raise ValueError("stencil order must be an even integer >= 2")
        self.a = int(a)
        self._cache = {}

    def window(self, j):
        """(interior window size, edge window size) for derivative j."""
        interior = j + self.a - 1 if j % 2 == 0 else j + self.a
        return interior, j + self.a

    def matrix(self, N, j, dtype=np.float64):
        """(N+1)x(N+1) matrix mapping node values to j-th derivative values.

        The grid is the uniform partition of a unit interval, h = 1/N.
        """
        dtype = np.dtype(dtype)
        key = (N, j, dtype)
        if key in self._cache:
            return self._cache[key]
        if j == 0:
            mat = np.eye(N + 1, dtype=dtype)
            self._cache[key] = mat
            return mat
        interior, edge = self.window(j)
        if N + 1 < edge:
            raise GridTooCoarse(
                f"derivative {j} at order {self.a} needs {edge} nodes, "
                f"grid has {N + 1}")
        mat = np.zeros((N + 1, N + 1), dtype=dtype)
        r = (interior - 1) // 2
        scale = dtype.type(N) ** j
        for i in range(N + 1):
            if r <= i <= N - r:
                lo = i - r
                w = interior
            else:
                w = edge
                lo = 0 if i < r else N - w + 1
            nodes = np.arange(lo, lo + w)
            weights = fornberg_weights(dtype.type(i), nodes.astype(dtype),
                                       j)[:, j]
            mat[i, nodes] = weights * scale
        self._cache[key] = mat
        return mat


_STENCIL_SETS = {}


def stencil_set(a=4):
    if a not in _STENCIL_SETS:
        _STENCIL_SETS[a] = StencilSet(a)
    return _STENCIL_SETS[a]


_UNIFORM_CACHE = {}


def uniform_window_matrix(N, j, w, dtype=np.float64):
    """j-th derivative matrix whose every row uses a sliding window of w nodes.

    Exactness degree w-1 at each node; used wherever the output feeds
    further differentiation, because the extra exactness absorbs the order
    lost per composition at the arc ends.
    """
    dtype = np.dtype(dtype)
    key = (N, j, w, dtype)
    if key in _UNIFORM_CACHE:
        return _UNIFORM_CACHE[key]
    if N + 1 < w:
        raise GridTooCoarse(
            f"window of {w} nodes does not fit a grid of {N + 1}")
    mat = np.zeros((N + 1, N + 1), dtype=dtype)
    r = (w - 1) // 2
    scale = dtype.type(N) ** j
    for i in range(N + 1):
        lo = min(max(i - r, 0), N - w + 1)
        nodes = np.arange(lo, lo + w)
        mat[i, nodes] = fornberg_weights(dtype.type(i), nodes.astype(dtype),
                                         j)[:, j] * scale
    _UNIFORM_CACHE[key] = mat
    return mat


def _chain_window(depth, a):
    w = a + depth + 1
    return w + 1 if w % 2 == 0 else w


# Accumulated rounding in an m-fold composition of h^-1-scaled matrices grows
# like (C N)^m eps, which overtakes the h^a truncation error of the deep
# (k >= 3) operators on practically sized grids.  Those assemblies therefore
# accumulate in extended precision where the platform provides it; inputs and
# results stay float64.
_EXTENDED = (np.dtype(np.longdouble)
             if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps
             else np.dtype(np.float64))


def _work_dtype(depth):
    return _EXTENDED if depth >= 4 else np.dtype(np.float64)


def chain_derivative_matrix(N, depth, a=4):
    """First-derivative matrix safe to compose ``depth`` times at order a.

    One-sided stencil error is not a smooth grid function, so every
    composition of a plain order-a first-derivative matrix loses one order
    near the arc ends.  A sliding window of a + depth + 1 nodes (exactness
    degree a + depth) compensates: after ``depth`` compositions the end rows
    still carry O(h^a) error.
    """
    try:
        return uniform_window_matrix(N, 1, _chain_window(depth, a))
    except GridTooCoarse:
        raise GridTooCoarse(
            f"composed covariant derivatives of depth {depth} need "
            f"{_chain_window(depth, a)} nodes at order {a}, grid has {N + 1}")


def trapezoid(values, h):
    """Composite trapezoid quadrature of nodal values (first axis)."""
    values = np.asarray(values, dtype=float)
    return h * (values.sum(axis=0) - 0.5 * (values[0] + values[-1]))


# --- covariant derivatives --------------------------------------------------------


def covariant_derivative(manifold, arc, i, a=4, window=None):
    """Samples of D_x^i d_x gamma along the arc, shape (N+1, n).

    i = 0 is the tangent-projected first derivative; each further order
    applies D_x V = d_x V - Pi(V, d_x gamma).
    """
    if i < 0:
        raise ValueError("derivative order must be >= 0")
    return np.asarray(_covariant_chain(manifold, arc, i, a, window=window)[i],
                      dtype=np.float64)


def covariant_derivative_of_field(manifold, arc, field, i, a=4, dtype=None,
                                  window=None):
    """Apply the covariant recursion i times to a given tangent field."""
    dtype = _work_dtype(i) if dtype is None else np.dtype(dtype)
    if window is None:
        window = _chain_window(max(i, 1), a)
    d1 = uniform_window_matrix(arc.N, 1, window, dtype)
    g = arc.samples.astype(dtype)
    t0 = manifold.project_tangent(g, d1 @ g, check=False)
    v = np.asarray(field, dtype=dtype)
    for _ in range(i):
        v = d1 @ v - manifold.second_fundamental_form(g, v, t0, check=False)
    return v


def w_correction(manifold, arc, i, a=4, dtype=None):
    """Correction field W_i = D_x^i d_x gamma - d_x^{i+1} gamma (W_0 = 0).

    Assembled by its own recursion on raw partial derivatives,
        W_i = d_x W_{i-1} - Pi(d_x^i gamma + W_{i-1}, d_x gamma),
    which is the extrinsic counterpart of the covariant recursion.
    """
    dtype = _work_dtype(i) if dtype is None else np.dtype(dtype)
    g = arc.samples.astype(dtype)
    if i == 0:
        return np.zeros_like(g)
    win = _chain_window(i, a)
    d1 = uniform_window_matrix(arc.N, 1, win, dtype)
    t0 = manifold.project_tangent(g, d1 @ g, check=False)
    w = np.zeros_like(g)
    for r in range(1, i + 1):
        # W_r is differentiated i - r more times, so the partial feeding it
        # needs the same widened window as the composed first derivative.
        dr = uniform_window_matrix(arc.N, r, win, dtype)
        w = d1 @ w - manifold.second_fundamental_form(
            g, dr @ g + w, t0, check=False)
    return w


# --- stationarity operators --------------------------------------------------------


def _covariant_chain(manifold, arc, top, a, dtype=None, window=None):
    """List [V_0, ..., V_top] of covariant derivative fields, shared recursion."""
    dtype = _work_dtype(top) if dtype is None else np.dtype(dtype)
    if window is None:
        window = _chain_window(max(top, 1), a)
    d1 = uniform_window_matrix(arc.N, 1, window, dtype)
    g = arc.samples.astype(dtype)
    t0 = manifold.project_tangent(g, d1 @ g, check=False)
    chain = [t0]
    v = t0
    for _ in range(top):
        v = d1 @ v - manifold.second_fundamental_form(g, v, t0, check=False)
        chain.append(v)
    return chain


def euler_lagrange(manifold, arc, k, lam=0.0, a=4):
    """Intrinsic stationarity operator, sampled at every node.

    (-1)^{k+1} D_x^{2k-1} gamma_x
      + sum_{mu=2}^{k} (-1)^{mu+k+1} R(D_x^{2k-mu-1} gamma_x,
                                       D_x^{mu-2} gamma_x) gamma_x
      + lam * D_x gamma_x
    """
    if k < 2:
        raise ValueError("derivative order k must be >= 2")
    v = _covariant_chain(manifold, arc, 2 * k - 1, a)
    g = arc.samples.astype(v[0].dtype)
    out = (-1.0) ** (k + 1) * v[2 * k - 1]
    for mu in range(2, k + 1):
        sign = (-1.0) ** (mu + k + 1)
        out = out + sign * manifold.curvature(
            g, v[2 * k - mu - 1], v[mu - 2], v[0], check=False)
    if lam:
        out = out + lam * v[1]
    return np.asarray(out, dtype=np.float64)


def extrinsic_rhs_gamma(manifold, arc, k, lam=0.0, a=4):
    """Extrinsic form of the stationarity operator.

    (-1)^{k+1} d_x^{2k} gamma + F_l, with F_l assembled from raw partials
    and W-correction fields (curvature slots receive d_x^i gamma + W_{i-1},
    the extrinsic representation of the covariant fields).  Agrees with
    euler_lagrange to stencil error.
    """
    if k < 2:
        raise ValueError("derivative order k must be >= 2")
    st = stencil_set(a)
    dtype = _work_dtype(2 * k - 1)
    g = arc.samples.astype(dtype)
    win = _chain_window(2 * k - 1, a)
    d1 = uniform_window_matrix(arc.N, 1, win, dtype)
    t0 = manifold.project_tangent(g, d1 @ g, check=False)

    # W_0..W_{2k-1} by the extrinsic recursion.  Partials inside the
    # recursion are differentiated again, so they share the widened window;
    # partials in the final assembly below use the plain stencils.
    w = [np.zeros_like(g)]
    for r in range(1, 2 * k):
        dr_wide = uniform_window_matrix(arc.N, r, win, dtype)
        w.append(d1 @ w[r - 1] - manifold.second_fundamental_form(
            g, dr_wide @ g + w[r - 1], t0, check=False))

    partial = {j: st.matrix(arc.N, j, dtype) @ g
               for j in {2 * k, 2} | {2 * k - mu for mu in range(2, k + 1)}
               | {mu - 1 for mu in range(2, k + 1)}}
    sign_top = (-1.0) ** (k + 1)
    out = sign_top * (partial[2 * k] + w[2 * k - 1])
    if lam:
        out = out + lam * (partial[2] + w[1])
    for mu in range(2, k + 1):
        sign = (-1.0) ** (mu + k + 1)
        first = partial[2 * k - mu] + w[2 * k - mu - 1]
        second = partial[mu - 1] + w[mu - 2]
        out = out + sign * manifold.curvature(g, first, second, t0, check=False)
    return np.asarray(out, dtype=np.float64)


# --- energies ----------------------------------------------------------------------


class EnergyBreakdown:
    """Energy parts: bending + tension + penalty = total, all nonnegative."""

    def __init__(self, bending, tension, penalty):
        self.bending = float(bending)
        self.tension = float(tension)
        self.penalty = float(penalty)
        self.total = self.bending + self.tension + self.penalty

    def __repr__(self):
        return (f"EnergyBreakdown(bending={self.bending:.6e}, "
                f"tension={self.tension:.6e}, penalty={self.penalty:.6e}, "
                f"total={self.total:.6e})")


def energy(manifold, state, config=None, a=None):
    """Composite-trapezoid energies of a network state.

    bending = 1/2 sum_l int |D_x^{k-1} gamma_{l,x}|^2
    tension = lam * sum_l 1/2 int |gamma_{l,x}|^2
    penalty = sigma^{-2} * sum_l 1/2 int |chi_{l,x}|^2   (fitting mode)
    """
    problem = state.problem
    if a is None:
        a = getattr(config, "a", 4)
    k = problem.k
    # energy shares the first-variation window, so the quadratic energy
    # resolves any direction field the derivative checks can feed it
    win = _chain_window(2 * k + 1, a)
    bending = 0.0
    tension = 0.0
    for arc in state.gamma_arcs:
        vk = covariant_derivative(manifold, arc, k - 1, a=a, window=win)
        bending += 0.5 * trapezoid(np.sum(vk * vk, axis=1), arc.h)
        if problem.lam:
            t0 = covariant_derivative(manifold, arc, 0, a=a, window=win)
            tension += 0.5 * problem.lam * trapezoid(
                np.sum(t0 * t0, axis=1), arc.h)
    penalty = 0.0
    if problem.mode == "fitting":
        for arc in state.chi_arcs:
            t0 = covariant_derivative(manifold, arc, 0, a=a, window=win)
            penalty += 0.5 / problem.sigma**2 * trapezoid(
                np.sum(t0 * t0, axis=1), arc.h)
    return EnergyBreakdown(bending, tension, penalty)


def energy_directional_derivative(manifold, state, direction, config=None,
                                  a=None):
    """Exact derivative of ``energy`` along a nodewise direction field.

    Forward-mode differentiation through the same windowed covariant chain
    and trapezoid sums that ``energy`` evaluates, so the result is the true
    derivative of the discrete functional (to roundoff), not a stencil
    approximation of the continuum first variation.  Energy-consistent time
    stepping relies on that exactness.
    """
    problem = state.problem
    if a is None:
        a = getattr(config, "a", 4)
    k = problem.k
    win = _chain_window(2 * k + 1, a)

    def pair_derivative(arc, w, depth, weight):
        d1 = uniform_window_matrix(arc.N, 1, win)
        g = arc.samples.astype(np.float64)
        dg = np.asarray(w, dtype=np.float64)
        u = d1 @ g
        du = d1 @ dg
        v = manifold.project_tangent(g, u, check=False)
        dv = manifold.project_tangent_jvp(g, u, dg, du)
        t0, dt0 = v, dv
        for _ in range(depth):
            pi = manifold.second_fundamental_form(g, v, t0, check=False)
            dpi = manifold.second_fundamental_form_jvp(g, v, t0, dg, dv, dt0)
            v, dv = d1 @ v - pi, d1 @ dv - dpi
        return weight * trapezoid(np.sum(v * dv, axis=1), arc.h)

    total = 0.0
    for arc, w in zip(state.gamma_arcs, direction["gamma"]):
        total += pair_derivative(arc, w, k - 1, 1.0)
        if problem.lam:
            total += pair_derivative(arc, w, 0, problem.lam)
    if problem.mode == "fitting":
        for arc, w in zip(state.chi_arcs, direction.get("chi", [])):
            total += pair_derivative(arc, w, 0, 1.0 / problem.sigma**2)
    return float(total)


# --- first variation ----------------------------------------------------------------


def _boundary_delta(values):
    """values at arc end minus values at arc start (per-arc boundary bracket)."""
    return values[-1] - values[0]


def first_variation(manifold, state, direction, a=4):
    """Assembled derivative of the energy along an admissible variation.

    Interior terms sum -<L, w> per spline arc (and the penalty analogue per
    chi arc); boundary brackets carry the transversality terms of the
    integration by parts:

      T1 = sum_{l=1}^{k} (-1)^{l-1} <D^{k-l} w, D^{k+l-2} gamma_x> |
      T2 = sum_{mu=2}^{k-1} sum_{l=1}^{k-mu} (-1)^{l-1}
               <D^{k-mu-l}[R(w, gamma_x) D^{mu-2} gamma_x],
                D^{k+l-2} gamma_x> |                       (k >= 3)
      T3 = lam <w, gamma_x> |
      T4 = sigma^{-2} <w_chi, chi_x> |
    """
    problem = state.problem
    k = problem.k
    dtype = _work_dtype(2 * k - 1)
    # boundary brackets nearly cancel between neighbouring arcs, so the
    # direction-field derivatives entering them get two extra orders of
    # exactness beyond the interior operator's window
    win = _chain_window(2 * k + 1, a)
    total = 0.0
    for arc, w in zip(state.gamma_arcs, direction["gamma"]):
        w = np.asarray(w, dtype=dtype)
        lam = problem.lam
        lop = euler_lagrange(manifold, arc, k, lam, a=a)
        total += trapezoid(-np.sum(lop * w, axis=1), arc.h)
        chain = _covariant_chain(manifold, arc, 2 * k - 2, a, dtype)
        for ell in range(1, k + 1):
            dw = covariant_derivative_of_field(manifold, arc, w, k - ell,
                                               a=a, dtype=dtype, window=win)
            bracket = np.sum(dw * chain[k + ell - 2], axis=1)
            total += (-1.0) ** (ell - 1) * _boundary_delta(bracket)
        for mu in range(2, k):
            base = manifold.curvature(arc.samples.astype(dtype), w, chain[0],
                                      chain[mu - 2], check=False)
            for ell in range(1, k - mu + 1):
                df = covariant_derivative_of_field(manifold, arc, base,
                                                   k - mu - ell, a=a,
                                                   dtype=dtype, window=win)
                bracket = np.sum(df * chain[k + ell - 2], axis=1)
                total += (-1.0) ** (ell - 1) * _boundary_delta(bracket)
        if lam:
            bracket = lam * np.sum(w * chain[0], axis=1)
            total += _boundary_delta(bracket)
    if problem.mode == "fitting":
        s2 = problem.sigma**2
        for arc, w in zip(state.chi_arcs, direction["chi"]):
            w = np.asarray(w, dtype=float)
            t0 = covariant_derivative(manifold, arc, 0, a=a)
            dchi = covariant_derivative(manifold, arc, 1, a=a)
            total += trapezoid(-np.sum(dchi * w, axis=1), arc.h) / s2
            bracket = np.sum(w * t0, axis=1) / s2
            total += _boundary_delta(bracket)
    return float(total)


def _perturbed_state(manifold, state, direction, eps):
    out = state.copy()
    for arc, w in zip(out.gamma_arcs, direction["gamma"]):
        arc.samples = manifold.project_point(arc.samples + eps * np.asarray(w))
    for arc, w in zip(out.chi_arcs, direction.get("chi", [])):
        arc.samples = manifold.project_point(arc.samples + eps * np.asarray(w))
    return out


def gradient_check(manifold, state, config, direction, eps=1e-5):
    """Relative mismatch between the finite-difference energy derivative and
    the assembled first variation along one admissible direction."""
    a = getattr(config, "a", 4)
    e_plus = energy(manifold, _perturbed_state(manifold, state, direction, eps),
                    a=a).total
    e_minus = energy(manifold, _perturbed_state(manifold, state, direction, -eps),
                     a=a).total
    fd = (e_plus - e_minus) / (2.0 * eps)
    analytic = first_variation(manifold, state, direction, a=a)
    scale = max(abs(fd), abs(analytic), 1e-14)
    return abs(fd - analytic) / scale


def _flat_step(s):
    """Quintic smoothstep: triple zero at 0, value 1 with two flat
    derivatives at 1."""
    return s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def random_admissible_direction(state, rng, scale=1.0, taper_order=None):
    """Smooth random variation compatible with all pinned data.

    A random low-order polynomial vector field F(x) on the whole network is
    multiplied by a smooth mask and projected to the tangent spaces of the
    current samples.  The mask vanishes to order k+2 at the outer endpoints:
    order k-1 keeps every clamped derivative fixed, and order k+2 removes
    the trapezoid rule's h^2 boundary term from the varied energy (the
    term carries the (k+1)-th direction derivative at the ends).  It
    vanishes linearly at interior Dirichlet knots in interpolation mode,
    and in fitting mode rises from a triple zero at each pinned chi data
    end to the gamma mask value at the junction, so junction triples vary
    in lockstep.  The total polynomial degree is kept small: high-degree
    masks have large high derivatives, which the difference windows resolve
    poorly and the finite-difference energy quotient then inherits.

    ``taper_order`` overrides the outer vanishing order; orders above k+2
    suppress quadrature boundary terms beyond h^2, which matters on states
    whose k-th derivative does not itself vanish at the outer endpoints.
    """
    problem = state.problem
    q = problem.q
    n = problem.n
    m = problem.manifold
    pw = problem.k + 2 if taper_order is None else int(taper_order)
    coeff = rng.standard_normal((2, n))

    def field(xs):
        u = xs / max(q, 1)
        return coeff[0] + coeff[1] * u[:, None]

    def outer_taper(xs):
        return (xs * (q - xs) / (0.25 * q * q)) ** pw

    if problem.mode == "interpolation":
        def mask(xs):
            out = outer_taper(xs)
            for l in range(1, q):
                out = out * (xs - l)
            return out
    else:
        mask = outer_taper

    direction = {"gamma": [], "chi": []}
    top = 0.0
    for arc in state.gamma_arcs:
        xs = arc.xs
        w = mask(xs)[:, None] * field(xs)
        w = m.project_tangent(arc.samples, w, check=False)
        direction["gamma"].append(w)
        top = max(top, float(np.max(np.linalg.norm(w, axis=1))))
    if problem.mode == "fitting":
        for arc in state.chi_arcs:
            l = arc.arc_index
            xs = arc.xs
            junction_weight = mask(np.array([float(l)]))[0]
            w = (junction_weight * _flat_step(xs - (l - 1)))[:, None] * field(xs)
            w = m.project_tangent(arc.samples, w, check=False)
            direction["chi"].append(w)
            top = max(top, float(np.max(np.linalg.norm(w, axis=1))))
    if top > 0:
        for key in ("gamma", "chi"):
            direction[key] = [scale * w / top for w in direction[key]]
    return direction
