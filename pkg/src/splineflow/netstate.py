"""Problem data and discrete network state.

A problem prescribes ordered data points p_0..p_q on a manifold with knots at
the integers, endpoint derivative clamps v^mu (mu = 1..k-1), the derivative
order k, tension weight lambda and (fitting mode) the penalty strength sigma.

A state holds one uniform grid per spline arc gamma_l on [l-1, l] and, in
fitting mode, per penalty arc chi_l on the same interval with chi_l(l-1)
pinned to the data point p_l and chi_l(l) glued to the junction.  Junction
nodes are duplicated -- each arc owns both of its endpoints -- so one-sided
derivatives and jump conditions are first-class; concurrency is an enforced
equality, not shared storage.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    IndexOutOfRange,
    InfeasibleBoundaryData,
    OffManifoldPoint,
    OracleUnavailable,
)
from .manifolds import EmbeddedManifold, Euclidean, manifold_from_name

__all__ = [
    "InterpolationProblem", "ArcGrid", "NetworkState", "build_initial_state",
    "junction_jump", "validate_admissibility", "state_to_json_dict",
    "state_from_json_dict", "write_state_csv",
    "Violation", "DirichletViolation", "ArityViolation",
    "ConcurrencyViolation", "OffManifoldViolation", "JumpViolation",
]


class InterpolationProblem:
    """Data defining one spline problem.

    Parameters
    ----------
    manifold : EmbeddedManifold
    points : array (q+1, n)
        Ordered data points on the manifold; knots are x_l = l.
    k : int >= 2
        Half the derivative order of the energy (k = 2: cubic-type splines).
    lam : float >= 0
        Tension weight.
    sigma : float or None
        None selects interpolation mode; a positive value selects fitting
        mode with penalty strength sigma.
    v_start, v_end : array (k-1, n) or None
        Endpoint derivative clamps v^mu, mu = 1..k-1, tangent at p_0 / p_q.
        Default zero vectors.
    """

    def __init__(self, manifold, points, k, lam=0.0, sigma=None,
                 v_start=None, v_end=None):
        if not isinstance(manifold, EmbeddedManifold):
            raise TypeError("manifold must be an EmbeddedManifold")
        self.manifold = manifold
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.points.shape[0] < 2:
            raise ValueError("need at least two data points (q >= 1)")
        if self.points.shape[1] != manifold.ambient_dim:
            raise ValueError(
                f"points have ambient dimension {self.points.shape[1]}, "
                f"manifold expects {manifold.ambient_dim}")
        self.k = int(k)
        if self.k < 2:
            raise ValueError("derivative order k must be >= 2")
        self.lam = float(lam)
        if self.lam < 0.0:
            raise ValueError("tension weight lambda must be >= 0")
        self.sigma = None if sigma is None else float(sigma)
        if self.sigma is not None and self.sigma <= 0.0:
            raise ValueError("penalty strength sigma must be > 0")

        n = self.points.shape[1]
        zeros = np.zeros((self.k - 1, n))
        self.v_start = zeros if v_start is None else \
            np.asarray(v_start, dtype=float).reshape(self.k - 1, n)
        self.v_end = zeros if v_end is None else \
            np.asarray(v_end, dtype=float).reshape(self.k - 1, n)

        bad = np.max(manifold.constraint_violation(self.points))
        if bad > 10.0 * manifold.tolerance:
            raise OffManifoldPoint(
                f"data point constraint violation {bad:.3e} on {manifold.kind}")

    @property
    def q(self):
        return self.points.shape[0] - 1

    @property
    def n(self):
        return self.points.shape[1]

    @property
    def knots(self):
        return np.arange(self.q + 1, dtype=float)

    @property
    def mode(self):
        return "interpolation" if self.sigma is None else "fitting"

    def check_clamps_tangent(self):
        """Raise InfeasibleBoundaryData if any v^mu has a normal component."""
        m = self.manifold
        for label, p, vs in (("start", self.points[0], self.v_start),
                             ("end", self.points[-1], self.v_end)):
            for mu, v in enumerate(vs, start=1):
                resid = np.linalg.norm(v - m.project_tangent(p, v, check=False))
                scale = max(1.0, np.linalg.norm(v))
                if resid > 10.0 * m.tolerance * scale:
                    raise InfeasibleBoundaryData(
                        f"clamp v^{mu} at {label} is not tangent "
                        f"(normal component {resid:.3e})")


@dataclass
class ArcGrid:
    """Uniform samples of one arc on [l-1, l]; the arc owns both endpoints."""

    samples: np.ndarray   # (N+1, n)
    arc_index: int        # l, 1-based
    arc_type: str = "gamma"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[0] < 2:
            raise ValueError("arc needs a (N+1, n) sample array with N >= 1")

    @property
    def N(self):
        return self.samples.shape[0] - 1

    @property
    def h(self):
        return 1.0 / self.N

    @property
    def xs(self):
        return (self.arc_index - 1) + np.arange(self.N + 1) / self.N

    def copy(self):
        return ArcGrid(self.samples.copy(), self.arc_index, self.arc_type)


@dataclass
class NetworkState:
    """All arc grids of the network at one flow time."""

    problem: InterpolationProblem
    gamma_arcs: list
    chi_arcs: list = field(default_factory=list)
    t: float = 0.0

    def copy(self):
        return NetworkState(self.problem,
                            [a.copy() for a in self.gamma_arcs],
                            [a.copy() for a in self.chi_arcs],
                            self.t)

    @property
    def N(self):
        return self.gamma_arcs[0].N


# --- violations -----------------------------------------------------------------


@dataclass
class Violation:
    where: str
    magnitude: float

    def __str__(self):
        return f"{type(self).__name__}({self.where}, magnitude={self.magnitude:.3e})"


class DirichletViolation(Violation):
    """A pinned node does not match its prescribed data point."""


class ArityViolation(Violation):
    """Arc counts or grid sizes do not match the problem."""


class ConcurrencyViolation(Violation):
    """Arcs meeting at a junction disagree about the junction point."""


class OffManifoldViolation(Violation):
    """A sample strayed off the manifold beyond tolerance."""


class JumpViolation(Violation):
    """A junction derivative jump exceeds its smallness threshold."""


# --- construction -----------------------------------------------------------------


def build_initial_state(problem, init_strategy="geodesic_polyline", N=64,
                        user_state=None):
    """Build an admissible initial state.

    Strategies: "geodesic_polyline" connects consecutive data points by
    geodesics; "oracle_spline" (Euclidean only) samples the exact polynomial
    spline; "user_supplied" takes ``user_state`` and re-pins its boundary
    nodes.  In fitting mode every chi arc starts as the constant map at its
    data point.
    """
    problem.check_clamps_tangent()
    m = problem.manifold
    q = problem.q
    fitting = problem.mode == "fitting"

    if init_strategy == "geodesic_polyline":
        s = np.linspace(0.0, 1.0, N + 1)
        gamma = [ArcGrid(m.geodesic(problem.points[l - 1], problem.points[l], s),
                         l) for l in range(1, q + 1)]
    elif init_strategy == "oracle_spline":
        if not isinstance(m, Euclidean):
            raise OracleUnavailable(
                f"oracle_spline initialization needs a Euclidean manifold, "
                f"got {m.kind}")
        from .oracle import euclidean_spline
        ref = problem if problem.lam == 0.0 else InterpolationProblem(
            m, problem.points, problem.k, 0.0, None,
            problem.v_start, problem.v_end)
        samples = euclidean_spline(ref).sample(N)
        gamma = [ArcGrid(samples[l - 1], l) for l in range(1, q + 1)]
    elif init_strategy == "user_supplied":
        if user_state is None:
            raise ValueError("user_supplied strategy needs a user_state")
        gamma = [a.copy() for a in user_state.gamma_arcs]
    else:
        raise ValueError(f"unknown init strategy {init_strategy!r}")

    if fitting:
        if init_strategy == "user_supplied" and user_state.chi_arcs:
            chi = [a.copy() for a in user_state.chi_arcs]
        else:
            chi = [ArcGrid(np.tile(problem.points[l], (N + 1, 1)), l, "chi")
                   for l in range(1, q)]
    else:
        chi = []

    state = NetworkState(problem, gamma, chi, 0.0)
    _pin_boundary_nodes(state)
    return state


def _pin_boundary_nodes(state):
    """Assign all Dirichlet and concurrency nodes exactly."""
    problem = state.problem
    q = problem.q
    gamma = state.gamma_arcs
    if problem.mode == "interpolation":
        for l in range(1, q + 1):
            gamma[l - 1].samples[0] = problem.points[l - 1]
            gamma[l - 1].samples[-1] = problem.points[l]
    else:
        gamma[0].samples[0] = problem.points[0]
        gamma[-1].samples[-1] = problem.points[q]
        # junction concurrency: average the two one-sided gamma values,
        # then glue chi's right end to the junction and pin its left end
        for l in range(1, q):
            j = problem.manifold.project_point(
                0.5 * (gamma[l - 1].samples[-1] + gamma[l].samples[0]))
            gamma[l - 1].samples[-1] = j
            gamma[l].samples[0] = j
            state.chi_arcs[l - 1].samples[-1] = j
            state.chi_arcs[l - 1].samples[0] = problem.points[l]


# --- jump measurement -----------------------------------------------------------


def junction_jump(state, l, mu, a=4):
    """Covariant derivative jump at interior knot x_l.

    Returns D_x^{mu-1} d_x gamma_{l+1}(x_l) - D_x^{mu-1} d_x gamma_l(x_l),
    each side measured with one-sided stencils of order ``a``.
    """
    problem = state.problem
    if not 1 <= l <= problem.q - 1:
        raise IndexOutOfRange(f"junction index {l} not in 1..{problem.q - 1}")
    if not 1 <= mu <= 2 * problem.k - 1:
        raise IndexOutOfRange(f"jump order {mu} not in 1..{2 * problem.k - 1}")
    from .calculus import covariant_derivative
    left = covariant_derivative(problem.manifold, state.gamma_arcs[l - 1],
                                mu - 1, a=a)
    right = covariant_derivative(problem.manifold, state.gamma_arcs[l],
                                 mu - 1, a=a)
    return right[0] - left[-1]


# --- admissibility ----------------------------------------------------------------


def validate_admissibility(state, mode=None, check_derivatives=False,
                           jump_tol=None, a=4):
    """Collect boundary-condition violations; empty list means admissible.

    Value-level checks (Dirichlet pinning, junction concurrency, arc counts,
    on-manifold samples) always run.  Derivative jump checks are opt-in via
    ``check_derivatives`` because rough-but-admissible initial states
    (polylines) carry O(1) corner jumps by design.
    """
    problem = state.problem
    mode = mode or problem.mode
    m = problem.manifold
    q = problem.q
    out = []
    scale = max(1.0, float(np.max(np.abs(problem.points))))
    tol = 10.0 * m.tolerance * scale

    if len(state.gamma_arcs) != q:
        out.append(ArityViolation(
            f"gamma arc count {len(state.gamma_arcs)} != q = {q}",
            abs(len(state.gamma_arcs) - q)))
        return out
    want_chi = q - 1 if mode == "fitting" else 0
    if len(state.chi_arcs) != want_chi:
        out.append(ArityViolation(
            f"chi arc count {len(state.chi_arcs)} != {want_chi}",
            abs(len(state.chi_arcs) - want_chi)))
        return out
    sizes = {arc.N for arc in state.gamma_arcs + state.chi_arcs}
    if len(sizes) != 1:
        out.append(ArityViolation(f"inconsistent grid sizes {sorted(sizes)}",
                                  float(len(sizes))))
        return out

    for arc in state.gamma_arcs + state.chi_arcs:
        bad = float(np.max(m.constraint_violation(arc.samples)))
        if bad > tol:
            out.append(OffManifoldViolation(
                f"{arc.arc_type} arc {arc.arc_index}", bad))

    def _check(vec, target, where):
        d = float(np.linalg.norm(vec - target))
        if d > tol:
            out.append(DirichletViolation(where, d))

    gamma = state.gamma_arcs
    if mode == "interpolation":
        for l in range(1, q + 1):
            _check(gamma[l - 1].samples[0], problem.points[l - 1],
                   f"gamma_{l}(x_{l - 1})")
            _check(gamma[l - 1].samples[-1], problem.points[l],
                   f"gamma_{l}(x_{l})")
    else:
        _check(gamma[0].samples[0], problem.points[0], "gamma_1(x_0)")
        _check(gamma[-1].samples[-1], problem.points[q], f"gamma_{q}(x_{q})")
        for l in range(1, q):
            chi = state.chi_arcs[l - 1]
            _check(chi.samples[0], problem.points[l], f"chi_{l}(x_{l - 1})")
            dj = float(np.linalg.norm(gamma[l - 1].samples[-1]
                                      - gamma[l].samples[0]))
            if dj > tol:
                out.append(ConcurrencyViolation(
                    f"gamma junction at x_{l}", dj))
            dj = float(np.linalg.norm(chi.samples[-1] - gamma[l].samples[0]))
            if dj > tol:
                out.append(ConcurrencyViolation(
                    f"chi_{l} gluing at x_{l}", dj))

    if check_derivatives and q >= 2:
        h = state.gamma_arcs[0].h
        thresh = jump_tol if jump_tol is not None else 100.0 * h ** a
        for l in range(1, q):
            for mu in range(1, 2 * problem.k - 1):
                jump = float(np.linalg.norm(junction_jump(state, l, mu, a=a)))
                if jump > thresh:
                    out.append(JumpViolation(
                        f"order-{mu} jump at x_{l}", jump))
    return out


# --- serialization ----------------------------------------------------------------


def state_to_json_dict(state):
    problem = state.problem
    return {
        "manifold": problem.manifold.kind,
        "k": problem.k,
        "lambda": problem.lam,
        "sigma": problem.sigma,
        "points": problem.points.tolist(),
        "v_start": problem.v_start.tolist(),
        "v_end": problem.v_end.tolist(),
        "t": state.t,
        "gamma_arcs": [{"arc_index": a.arc_index,
                        "samples": a.samples.tolist()}
                       for a in state.gamma_arcs],
        "chi_arcs": [{"arc_index": a.arc_index,
                      "samples": a.samples.tolist()}
                     for a in state.chi_arcs],
    }


def state_from_json_dict(data):
    problem = InterpolationProblem(
        manifold_from_name(data["manifold"]),
        np.array(data["points"], dtype=float),
        data["k"], data.get("lambda", 0.0), data.get("sigma"),
        np.array(data["v_start"], dtype=float),
        np.array(data["v_end"], dtype=float))
    gamma = [ArcGrid(np.array(d["samples"], dtype=float), d["arc_index"])
             for d in data["gamma_arcs"]]
    chi = [ArcGrid(np.array(d["samples"], dtype=float), d["arc_index"], "chi")
           for d in data["chi_arcs"]]
    return NetworkState(problem, gamma, chi, float(data.get("t", 0.0)))


def write_state_csv(state, fileobj):
    """Rows (arc_type, arc_index, x, coord_1..coord_n, t) for every node."""
    n = state.problem.n
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["arc_type", "arc_index", "x"]
                    + [f"coord_{i + 1}" for i in range(n)] + ["t"])
    for arc in list(state.gamma_arcs) + list(state.chi_arcs):
        for x, row in zip(arc.xs, arc.samples):
            writer.writerow([arc.arc_type, arc.arc_index, repr(float(x))]
                            + [repr(float(c)) for c in row]
                            + [repr(float(state.t))])


def state_csv_text(state):
    buf = io.StringIO()
    write_state_csv(state, buf)
    return buf.getvalue()
