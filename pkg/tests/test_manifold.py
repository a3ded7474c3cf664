"""Geometry tests: worked examples with known answers, then invariant
properties (projector algebra, symmetry of Pi, Gauss equation, Bianchi,
geodesic endpoint/speed checks) on seeded random data."""

import numpy as np
import pytest

from splineflow.errors import (
    ConjugateConfiguration,
    DegeneratePoint,
    NonTangentInput,
    OffManifoldPoint,
)
from splineflow.manifolds import (
    Euclidean,
    SpecialOrthogonal3,
    Sphere,
    manifold_from_name,
)

ALL_MANIFOLDS = [Euclidean(3), Sphere(2), Sphere(4), SpecialOrthogonal3()]


def _ids(ms):
    return [m.kind for m in ms]


# --- worked examples ---------------------------------------------------------


def test_sphere_point_projection_example():
    s2 = Sphere(2)
    np.testing.assert_allclose(s2.project_point([2.0, 0.0, 0.0]),
                               [1.0, 0.0, 0.0], atol=1e-15)


def test_sphere_tangent_projection_example():
    s2 = Sphere(2)
    p = np.array([0.0, 0.0, 1.0])
    v = np.array([0.3, -0.7, 2.5])
    np.testing.assert_allclose(s2.project_tangent(p, v), [0.3, -0.7, 0.0],
                               atol=1e-15)


def test_sphere_second_fundamental_form_example():
    s2 = Sphere(2)
    p = np.array([1.0, 0.0, 0.0])
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(s2.second_fundamental_form(p, u, u),
                               [-1.0, 0.0, 0.0], atol=1e-15)


def test_sphere_midpoint_geodesic():
    s2 = Sphere(2)
    p = np.array([1.0, 0.0, 0.0])
    q = np.array([0.0, 1.0, 0.0])
    mid = s2.geodesic(p, q, 0.5)
    r = np.sqrt(0.5)
    np.testing.assert_allclose(mid, [r, r, 0.0], atol=1e-14)


def test_sphere_sectional_curvature_is_one():
    s2 = Sphere(2)
    p = np.array([0.0, 0.0, 1.0])
    x = np.array([1.0, 0.0, 0.0])
    y = np.array([0.0, 1.0, 0.0])
    # K = <R(x,y)y, x> for orthonormal x, y
    k = np.dot(s2.curvature(p, x, y, y), x)
    assert abs(k - 1.0) < 1e-14


def test_so3_tangent_projection_is_left_translated_skew():
    so3 = SpecialOrthogonal3()
    rng = np.random.default_rng(7)
    p = so3.random_point(rng)
    v = rng.standard_normal(9)
    t = so3.project_tangent(p, v)
    omega = p.reshape(3, 3).T @ t.reshape(3, 3)
    np.testing.assert_allclose(omega, -omega.T, atol=1e-13)


def test_so3_sectional_curvature_quarter_bracket():
    so3 = SpecialOrthogonal3()
    rng = np.random.default_rng(11)
    p = so3.random_point(rng)
    pm = p.reshape(3, 3)
    for _ in range(5):
        x = so3.random_tangent(rng, p)
        y = so3.random_tangent(rng, p)
        ox = pm.T @ x.reshape(3, 3)
        oy = pm.T @ y.reshape(3, 3)
        num = np.dot(so3.curvature(p, x, y, y), x)
        area2 = np.dot(x, x) * np.dot(y, y) - np.dot(x, y) ** 2
        bracket = ox @ oy - oy @ ox
        expected = 0.25 * np.sum(bracket * bracket)
        assert abs(num - expected) < 1e-12 * max(1.0, area2)


def test_so3_geodesic_is_rotation_subgroup():
    so3 = SpecialOrthogonal3()
    rng = np.random.default_rng(3)
    p = so3.random_point(rng)
    q = so3.random_point(rng)
    mid = so3.geodesic(p, q, 0.5)
    # midpoint squared equals the relative rotation
    rel_half = p.reshape(3, 3).T @ mid.reshape(3, 3)
    rel = p.reshape(3, 3).T @ q.reshape(3, 3)
    np.testing.assert_allclose(rel_half @ rel_half, rel, atol=1e-12)


# --- projector and tangent algebra -------------------------------------------


@pytest.mark.parametrize("m", ALL_MANIFOLDS, ids=_ids(ALL_MANIFOLDS))
def test_tangent_projector_symmetric_idempotent(m):
    rng = np.random.default_rng(21)
    for _ in range(10):
        p = m.random_point(rng)
        pr = m.tangent_projector(p)
        assert np.max(np.abs(pr - pr.T)) < 1e-12
        assert np.max(np.abs(pr @ pr - pr)) < 1e-12
        assert abs(np.trace(pr) - m.intrinsic_dim) < 1e-10


@pytest.mark.parametrize("m", ALL_MANIFOLDS, ids=_ids(ALL_MANIFOLDS))
def test_tangent_basis_orthonormal_and_tangent(m):
    rng = np.random.default_rng(22)
    p = m.random_point(rng)
    basis = m.tangent_basis(p)
    assert basis.shape == (m.intrinsic_dim, m.ambient_dim)
    np.testing.assert_allclose(basis @ basis.T, np.eye(m.intrinsic_dim),
                               atol=1e-12)
    for e in basis:
        np.testing.assert_allclose(m.project_tangent(p, e, check=False), e,
                                   atol=1e-12)


@pytest.mark.parametrize("m", ALL_MANIFOLDS, ids=_ids(ALL_MANIFOLDS))
def test_second_fundamental_form_symmetric_and_normal(m):
    rng = np.random.default_rng(23)
    for _ in range(10):
        p = m.random_point(rng)
        u = m.random_tangent(rng, p)
        v = m.random_tangent(rng, p)
        pi_uv = m.second_fundamental_form(p, u, v)
        pi_vu = m.second_fundamental_form(p, v, u)
        assert np.max(np.abs(pi_uv - pi_vu)) < 1e-12 * max(
            1.0, np.linalg.norm(u) * np.linalg.norm(v))
        # normal-valued: tangent projection annihilates it
        assert np.linalg.norm(m.project_tangent(p, pi_uv, check=False)) < 1e-10


# --- curvature identities -----------------------------------------------------


@pytest.mark.parametrize("m", ALL_MANIFOLDS, ids=_ids(ALL_MANIFOLDS))
def test_curvature_antisymmetry_and_bianchi(m):
    rng = np.random.default_rng(24)
    for _ in range(10):
        p = m.random_point(rng)
        x, y, z = (m.random_tangent(rng, p) for _ in range(3))
        rxy = m.curvature(p, x, y, z)
        ryx = m.curvature(p, y, x, z)
        assert np.max(np.abs(rxy + ryx)) < 1e-10
        bianchi = (rxy + m.curvature(p, y, z, x) + m.curvature(p, z, x, y))
        assert np.max(np.abs(bianchi)) < 1e-10


@pytest.mark.parametrize("m", ALL_MANIFOLDS, ids=_ids(ALL_MANIFOLDS))
def test_curvature_tensor_is_tangent_valued(m):
    rng = np.random.default_rng(25)
    p = m.random_point(rng)
    x, y, z = (m.random_tangent(rng, p) for _ in range(3))
    r = m.curvature(p, x, y, z)
    np.testing.assert_allclose(m.project_tangent(p, r, check=False), r,
                               atol=1e-11)


@pytest.mark.parametrize("m", ALL_MANIFOLDS, ids=_ids(ALL_MANIFOLDS))
def test_gauss_equation_consistency(m):
    rng = np.random.default_rng(26)
    for _ in range(100):
        p = m.random_point(rng)
        x, y, z = (m.random_tangent(rng, p) for _ in range(3))
        direct = m.curvature(p, x, y, z)
        via_gauss = m.curvature_via_gauss(p, x, y, z)
        scale = max(1.0, np.linalg.norm(x) * np.linalg.norm(y)
                    * np.linalg.norm(z))
        assert np.max(np.abs(direct - via_gauss)) < 1e-8 * scale


# --- geodesics ----------------------------------------------------------------


@pytest.mark.parametrize("m", ALL_MANIFOLDS, ids=_ids(ALL_MANIFOLDS))
def test_geodesic_endpoints_and_constraint(m):
    rng = np.random.default_rng(27)
    p = m.random_point(rng)
    q = m.random_point(rng)
    s = np.linspace(0.0, 1.0, 17)
    path = m.geodesic(p, q, s)
    np.testing.assert_allclose(path[0], p, atol=1e-12)
    np.testing.assert_allclose(path[-1], q, atol=1e-12)
    assert np.max(m.constraint_violation(path)) <= m.tolerance


@pytest.mark.parametrize("m", ALL_MANIFOLDS, ids=_ids(ALL_MANIFOLDS))
def test_geodesic_constant_speed(m):
    rng = np.random.default_rng(28)
    p = m.random_point(rng)
    q = m.random_point(rng)
    s = np.linspace(0.0, 1.0, 201)
    path = m.geodesic(p, q, s)
    speeds = np.linalg.norm(np.diff(path, axis=0), axis=1)
    assert speeds.std() < 1e-4 * max(speeds.mean(), 1e-12)


# --- error conditions ----------------------------------------------------------


def test_sphere_degenerate_projection():
    with pytest.raises(DegeneratePoint):
        Sphere(2).project_point([0.0, 0.0, 0.0])


def test_sphere_antipodal_geodesic_raises():
    with pytest.raises(ConjugateConfiguration):
        Sphere(2).geodesic([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], 0.5)


def test_so3_half_turn_geodesic_raises():
    so3 = SpecialOrthogonal3()
    p = np.eye(3).reshape(9)
    q = np.diag([1.0, -1.0, -1.0]).reshape(9)  # rotation by pi about x-axis
    with pytest.raises(ConjugateConfiguration):
        so3.geodesic(p, q, 0.5)


def test_so3_singular_projection_raises():
    so3 = SpecialOrthogonal3()
    with pytest.raises(DegeneratePoint):
        so3.project_point(np.zeros(9))
    rank2 = np.diag([1.0, 1.0, 0.0]).reshape(9)
    with pytest.raises(DegeneratePoint):
        so3.project_point(rank2)


def test_so3_reflection_projection_raises():
    so3 = SpecialOrthogonal3()
    refl = np.diag([1.0, 1.0, -1.0]).reshape(9)
    with pytest.raises(DegeneratePoint):
        so3.project_point(refl)


def test_off_manifold_point_rejected():
    s2 = Sphere(2)
    with pytest.raises(OffManifoldPoint):
        s2.project_tangent([1.5, 0.0, 0.0], [0.0, 1.0, 0.0])


def test_non_tangent_input_rejected():
    s2 = Sphere(2)
    p = np.array([1.0, 0.0, 0.0])
    with pytest.raises(NonTangentInput):
        s2.second_fundamental_form(p, p, p)


def test_retraction_restores_tolerance():
    rng = np.random.default_rng(29)
    for m in ALL_MANIFOLDS:
        p = m.random_point(rng)
        nudged = p + 1e-6 * rng.standard_normal(m.ambient_dim)
        back = m.project_point(nudged)
        assert np.max(m.constraint_violation(back)) <= m.tolerance


# --- factory -------------------------------------------------------------------


@pytest.mark.parametrize("name,cls,n", [
    ("euclidean:3", Euclidean, 3),
    ("sphere:2", Sphere, 3),
    ("so3", SpecialOrthogonal3, 9),
])
def test_manifold_from_name(name, cls, n):
    m = manifold_from_name(name)
    assert isinstance(m, cls)
    assert m.ambient_dim == n
    assert m.kind == name


@pytest.mark.parametrize("bad", ["torus:2", "sphere:x", "euclidean", ""])
def test_manifold_from_name_rejects_unknown(bad):
    with pytest.raises(ValueError):
        manifold_from_name(bad)
