"""Embedded-manifold geometry.

Points live in ambient R^n.  Each manifold provides the constraint residual,
a retraction (nearest-point style projection), tangent projection, the second
fundamental form Pi (normal-valued, symmetric bilinear), the Riemannian
curvature tensor R of the induced metric, and the connecting geodesic.

Sign conventions, fixed once and tested:
  * covariant derivative of a tangent field V along a curve c:
        D_x V = d/dx V - Pi(V, c')
    so Pi(c', c') equals the ambient acceleration of a geodesic;
  * curvature R(X,Y)Z = D_X D_Y Z - D_Y D_X Z - D_[X,Y] Z, which on the unit
    sphere gives R(X,Y)Z = <Y,Z>X - <X,Z>Y (sectional curvature +1).

All operations accept a single point ``(n,)`` or a batch ``(..., n)`` and are
pure; instances are immutable and safe to share between threads.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ConjugateConfiguration,
    DegeneratePoint,
    NonTangentInput,
    OffManifoldPoint,
)

__all__ = ["EmbeddedManifold", "Euclidean", "Sphere", "SpecialOrthogonal3",
           "manifold_from_name"]


class EmbeddedManifold:
    """Base class; subclasses fill in the geometry.

    Attributes
    ----------
    kind : str
        Name used in config files ("euclidean:m", "sphere:m", "so3").
    ambient_dim : int
        Dimension n of the ambient space.
    intrinsic_dim : int
        Dimension m of the manifold itself.
    tolerance : float
        Constraint tolerance; on-manifold points satisfy
        ``constraint_violation(p) <= tolerance``.
    """

    kind = "abstract"
    ambient_dim = 0
    intrinsic_dim = 0
    tolerance = 1e-9

    # --- constraint ---------------------------------------------------------

    def constraint_violation(self, p):
        """Scalar residual of the defining constraint; 0 on the manifold."""
        raise NotImplementedError

    def check_point(self, p):
        """Raise OffManifoldPoint if p is further than 10x tolerance off M."""
        v = np.max(self.constraint_violation(p))
        if v > 10.0 * self.tolerance:
            raise OffManifoldPoint(
                f"constraint violation {v:.3e} exceeds 10*tolerance on {self.kind}")

    def check_tangent(self, p, u):
        """Raise NonTangentInput if u has a normal component beyond 10x tolerance."""
        nrm = np.max(np.linalg.norm(u - self.project_tangent(p, u, check=False),
                                    axis=-1))
        scale = max(1.0, float(np.max(np.linalg.norm(u, axis=-1))))
        if nrm > 10.0 * self.tolerance * scale:
            raise NonTangentInput(
                f"normal component {nrm:.3e} exceeds 10*tolerance on {self.kind}")

    # --- core geometry (subclass responsibilities) --------------------------

    def project_point(self, v):
        raise NotImplementedError

    def project_tangent(self, p, v, check=True):
        raise NotImplementedError

    def second_fundamental_form(self, p, u, v, check=True):
        raise NotImplementedError

    def curvature(self, p, x, y, z, check=True):
        raise NotImplementedError

    def geodesic(self, p, q, s):
        raise NotImplementedError

    # --- directional linearizations -------------------------------------------
    #
    # Exact derivatives of the two bilinear/projective maps along a joint
    # perturbation of all arguments.  Energy-consistent time stepping needs
    # the *exact* derivative of the discrete energy, so these cannot be
    # replaced by finite differences.

    def project_tangent_jvp(self, p, u, dp, du):
        """d/de at e=0 of project_tangent(p + e dp, u + e du)."""
        raise NotImplementedError

    def second_fundamental_form_jvp(self, p, u, v, dp, du, dv):
        """d/de at e=0 of Pi_{p + e dp}(u + e du, v + e dv)."""
        raise NotImplementedError

    # --- derived utilities ---------------------------------------------------

    def tangent_projector(self, p):
        """The n x n orthogonal projector onto T_p M (single point only)."""
        p = np.asarray(p, dtype=float)
        eye = np.eye(self.ambient_dim)
        cols = [self.project_tangent(p, eye[i], check=False) for i in range(self.ambient_dim)]
        return np.stack(cols, axis=1)

    def tangent_basis(self, p):
        """Orthonormal basis of T_p M, shape (m, n)."""
        proj = self.tangent_projector(p)
        # eigenvectors with eigenvalue ~1 span the tangent space
        w, vecs = np.linalg.eigh(proj)
        idx = np.argsort(w)[::-1][: self.intrinsic_dim]
        basis = vecs[:, idx].T
        # orthonormal already (eigh); re-orthonormalize defensively
        q, _ = np.linalg.qr(basis.T)
        return q.T[: self.intrinsic_dim]

    def curvature_via_gauss(self, p, x, y, z):
        """Curvature reconstructed from Pi through the Gauss equation.

        Independent cross-check path:
            <R(X,Y)Z, W> = <Pi(X,W), Pi(Y,Z)> - <Pi(X,Z), Pi(Y,W)>
        evaluated against an orthonormal tangent basis in W.
        """
        basis = self.tangent_basis(p)
        pi_yz = self.second_fundamental_form(p, y, z, check=False)
        pi_xz = self.second_fundamental_form(p, x, z, check=False)
        out = np.zeros(self.ambient_dim)
        for e in basis:
            pi_xw = self.second_fundamental_form(p, x, e, check=False)
            pi_yw = self.second_fundamental_form(p, y, e, check=False)
            coeff = np.dot(pi_xw, pi_yz) - np.dot(pi_xz, pi_yw)
            out += coeff * e
        return out

    # --- sampling helpers (tests, fixtures) ----------------------------------

    def random_point(self, rng):
        return self.project_point(rng.standard_normal(self.ambient_dim))

    def random_tangent(self, rng, p):
        return self.project_tangent(p, rng.standard_normal(self.ambient_dim),
                                    check=False)


class Euclidean(EmbeddedManifold):
    """Flat R^m; projections are identities, Pi and R vanish."""

    def __init__(self, m):
        if m < 1:
            raise ValueError("ambient dimension must be >= 1")
        self.ambient_dim = int(m)
        self.intrinsic_dim = int(m)
        self.kind = f"euclidean:{m}"

    def constraint_violation(self, p):
        p = np.asarray(p, dtype=float)
        return np.zeros(p.shape[:-1])

    def project_point(self, v):
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            raise DegeneratePoint("non-finite ambient point")
        return v.copy()

    def project_tangent(self, p, v, check=True):
        return np.asarray(v, dtype=float).copy()

    def second_fundamental_form(self, p, u, v, check=True):
        u = np.asarray(u, dtype=float)
        return np.zeros_like(u)

    def curvature(self, p, x, y, z, check=True):
        x = np.asarray(x, dtype=float)
        return np.zeros_like(x)

    def project_tangent_jvp(self, p, u, dp, du):
        return np.asarray(du, dtype=float).copy()

    def second_fundamental_form_jvp(self, p, u, v, dp, du, dv):
        return np.zeros_like(np.asarray(du, dtype=float))

    def geodesic(self, p, q, s):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        s = np.asarray(s, dtype=float)
        return p + s[..., None] * (q - p) if s.ndim else p + s * (q - p)


class Sphere(EmbeddedManifold):
    """Unit sphere S^m embedded in R^{m+1}."""

    def __init__(self, m):
        if m < 1:
            raise ValueError("sphere dimension must be >= 1")
        self.ambient_dim = int(m) + 1
        self.intrinsic_dim = int(m)
        self.kind = f"sphere:{m}"

    def constraint_violation(self, p):
        p = np.asarray(p, dtype=float)
        return np.abs(np.linalg.norm(p, axis=-1) - 1.0)

    def project_point(self, v):
        v = np.asarray(v, dtype=float)
        nrm = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.any(nrm < 1e-8) or not np.all(np.isfinite(v)):
            raise DegeneratePoint("cannot radially project a (near-)zero vector")
        return v / nrm

    def project_tangent(self, p, v, check=True):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        if check:
            self.check_point(p)
        return v - np.sum(v * p, axis=-1, keepdims=True) * p

    def second_fundamental_form(self, p, u, v, check=True):
        p = np.asarray(p, dtype=float)
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if check:
            self.check_point(p)
            self.check_tangent(p, u)
            self.check_tangent(p, v)
        return -np.sum(u * v, axis=-1, keepdims=True) * p

    def curvature(self, p, x, y, z, check=True):
        p = np.asarray(p, dtype=float)
        x, y, z = (np.asarray(a, dtype=float) for a in (x, y, z))
        if check:
            self.check_point(p)
            for a in (x, y, z):
                self.check_tangent(p, a)
        yz = np.sum(y * z, axis=-1, keepdims=True)
        xz = np.sum(x * z, axis=-1, keepdims=True)
        return yz * x - xz * y

    def project_tangent_jvp(self, p, u, dp, du):
        p, u, dp, du = (np.asarray(a, dtype=float) for a in (p, u, dp, du))
        up = np.sum(u * p, axis=-1, keepdims=True)
        dup = np.sum(du * p + u * dp, axis=-1, keepdims=True)
        return du - dup * p - up * dp

    def second_fundamental_form_jvp(self, p, u, v, dp, du, dv):
        p, u, v, dp, du, dv = (np.asarray(a, dtype=float)
                               for a in (p, u, v, dp, du, dv))
        uv = np.sum(u * v, axis=-1, keepdims=True)
        duv = np.sum(du * v + u * dv, axis=-1, keepdims=True)
        return -duv * p - uv * dp

    def geodesic(self, p, q, s):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        cosang = np.clip(np.dot(p, q), -1.0, 1.0)
        theta = np.arccos(cosang)
        if theta > np.pi - 1e-6:
            raise ConjugateConfiguration(
                f"nearly antipodal endpoints (angle {theta:.6f}); geodesic not unique")
        s = np.asarray(s, dtype=float)
        s_col = s[..., None] if s.ndim else s
        if theta < 1e-8:
            # endpoints (nearly) coincide: chord + renormalization is exact enough
            out = p + s_col * (q - p)
            return out / np.linalg.norm(out, axis=-1, keepdims=True)
        w_p = np.sin((1.0 - s) * theta) / np.sin(theta)
        w_q = np.sin(s * theta) / np.sin(theta)
        if s.ndim:
            return w_p[..., None] * p + w_q[..., None] * q
        return w_p * p + w_q * q


def _mat(p):
    """View flattened 3x3 ambient coordinates (..., 9) as matrices (..., 3, 3)."""
    p = np.asarray(p, dtype=float)
    return p.reshape(p.shape[:-1] + (3, 3))


def _flat(m):
    return m.reshape(m.shape[:-2] + (9,))


def _skew_part(a):
    return 0.5 * (a - np.swapaxes(a, -1, -2))


def _sym_part(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _rodrigues_exp(omega):
    """Matrix exponential of a skew 3x3 via the axis-angle closed form."""
    w = np.array([omega[2, 1], omega[0, 2], omega[1, 0]])
    theta = np.linalg.norm(w)
    if theta < 1e-8:
        # series: exp = I + W + W^2/2 (+ O(theta^3), below roundoff here)
        return np.eye(3) + omega + 0.5 * (omega @ omega)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * omega + b * (omega @ omega)


def _rotation_log(r):
    """Principal logarithm of a rotation matrix (skew 3x3).

    Raises ConjugateConfiguration within 1e-6 of a half-turn, where the
    logarithm branches.
    """
    tr = np.trace(r)
    c = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    if theta > np.pi - 1e-6:
        raise ConjugateConfiguration(
            f"rotation angle {theta:.6f} too close to pi; logarithm branches")
    sk = _skew_part(r)
    if theta < 1e-8:
        # theta/(2 sin theta) -> 1/2; include the next series term
        return sk * (1.0 + theta**2 / 6.0)
    return sk * (theta / np.sin(theta))


class SpecialOrthogonal3(EmbeddedManifold):
    """Rotation group SO(3) embedded in R^9 with the Frobenius inner product.

    Tangent space at p is p*skew; the induced metric is bi-invariant, so
    geodesics are one-parameter subgroups p*exp(s*log(p^T q)).
    """

    def __init__(self):
        self.ambient_dim = 9
        self.intrinsic_dim = 3
        self.kind = "so3"

    def constraint_violation(self, p):
        m = _mat(p)
        eye = np.eye(3)
        orth = np.linalg.norm(
            np.swapaxes(m, -1, -2) @ m - eye, axis=(-2, -1))
        det_defect = np.maximum(0.0, 1.0 - np.linalg.det(m))
        return orth + det_defect

    def project_point(self, v):
        m = _mat(v)
        if not np.all(np.isfinite(m)):
            raise DegeneratePoint("non-finite ambient point")
        u, sv, vt = np.linalg.svd(m)
        if np.any(sv < 1e-8):
            raise DegeneratePoint("singular 3x3 block: no unique polar factor")
        rot = u @ vt
        det = np.linalg.det(rot)
        if np.any(det < 0):
            raise DegeneratePoint("nearest orthogonal factor is a reflection")
        return _flat(rot)

    def project_tangent(self, p, v, check=True):
        pm = _mat(p)
        vm = _mat(v)
        if check:
            self.check_point(p)
        return _flat(pm @ _skew_part(np.swapaxes(pm, -1, -2) @ vm))

    def second_fundamental_form(self, p, u, v, check=True):
        pm = _mat(p)
        if check:
            self.check_point(p)
            self.check_tangent(p, u)
            self.check_tangent(p, v)
        om_u = _skew_part(np.swapaxes(pm, -1, -2) @ _mat(u))
        om_v = _skew_part(np.swapaxes(pm, -1, -2) @ _mat(v))
        return _flat(pm @ _sym_part(om_u @ om_v))

    def curvature(self, p, x, y, z, check=True):
        pm = _mat(p)
        if check:
            self.check_point(p)
            for a in (x, y, z):
                self.check_tangent(p, a)
        pt = np.swapaxes(pm, -1, -2)
        ox = _skew_part(pt @ _mat(x))
        oy = _skew_part(pt @ _mat(y))
        oz = _skew_part(pt @ _mat(z))
        braket = ox @ oy - oy @ ox
        outer = braket @ oz - oz @ braket
        return _flat(pm @ (-0.25 * outer))

    def project_tangent_jvp(self, p, u, dp, du):
        pm, um, dpm, dum = _mat(p), _mat(u), _mat(dp), _mat(du)
        pt, dpt = np.swapaxes(pm, -1, -2), np.swapaxes(dpm, -1, -2)
        om = _skew_part(pt @ um)
        dom = _skew_part(dpt @ um + pt @ dum)
        return _flat(dpm @ om + pm @ dom)

    def second_fundamental_form_jvp(self, p, u, v, dp, du, dv):
        pm, dpm = _mat(p), _mat(dp)
        pt, dpt = np.swapaxes(pm, -1, -2), np.swapaxes(dpm, -1, -2)
        om_u = _skew_part(pt @ _mat(u))
        om_v = _skew_part(pt @ _mat(v))
        dom_u = _skew_part(dpt @ _mat(u) + pt @ _mat(du))
        dom_v = _skew_part(dpt @ _mat(v) + pt @ _mat(dv))
        return _flat(dpm @ _sym_part(om_u @ om_v)
                     + pm @ _sym_part(dom_u @ om_v + om_u @ dom_v))

    def geodesic(self, p, q, s):
        pm = _mat(p)
        qm = _mat(q)
        rel = pm.T @ qm
        omega = _rotation_log(rel)
        s = np.asarray(s, dtype=float)
        if s.ndim:
            return _flat(np.stack([pm @ _rodrigues_exp(si * omega) for si in s]))
        return _flat(pm @ _rodrigues_exp(float(s) * omega))

    def random_point(self, rng):
        # a Gaussian 3x3 has a reflection as polar factor half the time, so
        # draw a rotation directly as the exponential of a random skew matrix
        w = rng.standard_normal(3)
        omega = np.array([[0.0, -w[2], w[1]],
                          [w[2], 0.0, -w[0]],
                          [-w[1], w[0], 0.0]])
        return _flat(_rodrigues_exp(omega))


def manifold_from_name(name):
    """Parse the config-file manifold name: euclidean:m | sphere:m | so3."""
    name = name.strip().lower()
    if name == "so3":
        return SpecialOrthogonal3()
    if ":" in name:
        kind, _, dim = name.partition(":")
        try:
            m = int(dim)
        except ValueError:
            raise ValueError(f"bad manifold dimension in {name!r}")
        if kind == "euclidean":
            return Euclidean(m)
        if kind == "sphere":
            return Sphere(m)
    raise ValueError(f"unknown manifold name {name!r} "
                     "(expected euclidean:m, sphere:m, or so3)")
