import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homotopy_gym.geom import (
    BezierQuad, bezier_eval, bezier_point, composite_inertia, is_rotation,
    reorthonormalize, rotation_defect, skew, so3_exp,
)


def test_so3_exp_zero_is_identity():
    np.testing.assert_array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_so3_exp_quarter_yaw():
    R = so3_exp(np.array([0.0, 0.0, np.pi / 2]))
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(R, expected, atol=1e-12)


def test_so3_exp_half_turn_about_x():
    R = so3_exp(np.array([np.pi, 0.0, 0.0]))
    np.testing.assert_allclose(R, np.diag([1.0, -1.0, -1.0]), atol=1e-12)


def test_so3_exp_inverse_property():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        w = rng.standard_normal(3)
        n = np.linalg.norm(w)
        if n > np.pi:
            w *= rng.uniform(0, np.pi) / n
        err = so3_exp(w) @ so3_exp(-w) - np.eye(3)
        assert np.abs(err).max() < 1e-10


def test_so3_exp_preserves_norm():
    rng = np.random.default_rng(1)
    for _ in range(200):
        w = rng.standard_normal(3)
        v = rng.standard_normal(3)
        assert abs(np.linalg.norm(so3_exp(w) @ v) - np.linalg.norm(v)) < 1e-12


def test_so3_exp_small_angle_branch():
    w = np.array([1e-9, -2e-9, 5e-10])
    R = so3_exp(w)
    assert is_rotation(R, tol=1e-12)
    np.testing.assert_allclose(R, np.eye(3) + skew(w), atol=1e-17)


def test_skew_matches_cross():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-15)


def test_reorthonormalize_fixes_drift():
    rng = np.random.default_rng(3)
    R = so3_exp(rng.standard_normal(3))
    drifted = R + 1e-6 * rng.standard_normal((3, 3))
    fixed = reorthonormalize(drifted)
    assert rotation_defect(fixed) < 1e-12
    assert np.abs(fixed - R).max() < 1e-5


def test_reorthonormalize_identity_below_tolerance():
    R = so3_exp(np.array([0.3, -0.2, 0.9]))
    assert reorthonormalize(R) is R


def test_bezier_endpoints_exact():
    rng = np.random.default_rng(4)
    b = BezierQuad(*rng.standard_normal((3, 3)))
    np.testing.assert_array_equal(bezier_eval(b, 0.0), b.p0)
    np.testing.assert_array_equal(bezier_eval(b, 1.0), b.p2)


def test_bezier_midpoint():
    b = BezierQuad(np.array([1.0, 0, 0]), np.array([0, 2.0, 0]), np.array([0, 0, 4.0]))
    np.testing.assert_allclose(bezier_eval(b, 0.5),
                               0.25 * b.p0 + 0.5 * b.p1 + 0.25 * b.p2, atol=1e-15)


def test_bezier_clamps_out_of_range():
    b = BezierQuad(np.zeros(3), np.ones(3), 2 * np.ones(3))
    np.testing.assert_array_equal(bezier_eval(b, -0.5), b.p0)
    np.testing.assert_array_equal(bezier_eval(b, 1.5), b.p2)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0))
def test_bezier_stays_in_convex_hull(s):
    p0 = np.array([0.0, 0.0, 0.0])
    p1 = np.array([1.0, 2.0, -1.0])
    p2 = np.array([2.0, 0.0, 1.0])
    point = bezier_point(p0, p1, p2, s)
    # Barycentric coordinates of the quadratic Bernstein basis sum to one and
    # are non-negative, so the point must lie inside the triangle's AABB too.
    lo = np.minimum.reduce([p0, p1, p2])
    hi = np.maximum.reduce([p0, p1, p2])
    assert np.all(point >= lo - 1e-12) and np.all(point <= hi + 1e-12)


def test_bezier_batched_broadcast():
    rng = np.random.default_rng(5)
    p0, p1, p2 = rng.standard_normal((3, 7, 3))
    s = rng.uniform(0, 1, 7)
    batched = bezier_point(p0, p1, p2, s)
    for i in range(7):
        np.testing.assert_allclose(batched[i], bezier_point(p0[i], p1[i], p2[i], s[i]))


def test_composite_single_link_identity():
    I = np.diag([0.1, 0.2, 0.3])
    c = np.array([0.5, -0.2, 0.1])
    m, I_out, com = composite_inertia([(2.0, I, c)])
    assert m == 2.0
    np.testing.assert_array_equal(I_out, I)
    np.testing.assert_array_equal(com, c)


def test_composite_dumbbell():
    d = 0.35
    tiny = 1e-15 * np.eye(3)
    links = [(1.0, tiny, np.array([d, 0, 0])), (1.0, tiny, np.array([-d, 0, 0]))]
    m, I, com = composite_inertia(links)
    assert m == 2.0
    np.testing.assert_allclose(com, np.zeros(3), atol=1e-15)
    np.testing.assert_allclose(I[1, 1], 2 * d * d, atol=1e-12)
    np.testing.assert_allclose(I[2, 2], 2 * d * d, atol=1e-12)
    assert abs(I[0, 0]) < 1e-10


def test_composite_permutation_invariant():
    rng = np.random.default_rng(6)
    links = []
    for _ in range(6):
        a = rng.standard_normal((3, 3))
        links.append((rng.uniform(0.1, 2.0), a @ a.T + 0.1 * np.eye(3),
                      rng.standard_normal(3)))
    m1, I1, c1 = composite_inertia(links)
    m2, I2, c2 = composite_inertia(links[::-1])
    assert abs(m1 - m2) < 1e-12
    np.testing.assert_allclose(I1, I2, atol=1e-12)
    np.testing.assert_allclose(c1, c2, atol=1e-12)


def test_composite_rejects_non_positive_mass():
    with pytest.raises(ValueError):
        composite_inertia([(0.0, np.eye(3), np.zeros(3))])
    with pytest.raises(ValueError):
        composite_inertia([])


def _rod(mass, start, end):
    """Analytic thin-rod link (m, I about COM, COM) plus a point sampler."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    d = end - start
    length = np.linalg.norm(d)
    u = d / length
    com = 0.5 * (start + end)
    # I = m L^2 / 12 * (E - u u^T) for a thin rod.
    I = mass * length ** 2 / 12.0 * (np.eye(3) - np.outer(u, u))

    def sample(n):
        s = (np.arange(n) + 0.5) / n
        return start + s[:, None] * d

    return (mass, I, com), sample


def _box(mass, center, half):
    center, half = np.asarray(center, float), np.asarray(half, float)
    sx, sy, sz = 2 * half
    I = mass / 12.0 * np.diag([sy * sy + sz * sz, sx * sx + sz * sz, sx * sx + sy * sy])

    def sample(n_axis):
        g = [(np.arange(n_axis) + 0.5) / n_axis * 2 - 1 for _ in range(3)]
        pts = np.stack(np.meshgrid(*g, indexing="ij"), axis=-1).reshape(-1, 3)
        return center + pts * half

    return (mass, I, center), sample


def test_composite_vs_point_mass_discretization():
    """Quadruped-like assembly: analytic aggregation against a brute-force
    point cloud of >= 1e4 samples per link."""
    links, clouds = [], []
    link, sampler = _box(6.0, [0.0, 0.0, 0.28], [0.19, 0.11, 0.06])
    links.append(link)
    clouds.append((6.0, sampler(22)))          # 22^3 > 1e4 points
    for sx in (1, -1):
        for sy in (1, -1):
            hip = np.array([0.19 * sx, 0.172 * sy, 0.28])
            knee = hip + [0.1, 0.0, -0.17]
            foot = knee + [-0.1, 0.0, -0.17]
            for mass, a, b in [(0.8, hip, knee), (0.1, knee, foot)]:
                link, sampler = _rod(mass, a, b)
                links.append(link)
                clouds.append((mass, sampler(12000)))

    m, I, com = composite_inertia(links)

    pts = np.concatenate([c for _, c in clouds])
    wts = np.concatenate([np.full(len(c), mm / len(c)) for mm, c in clouds])
    m_ref = wts.sum()
    com_ref = (wts[:, None] * pts).sum(0) / m_ref
    d = pts - com_ref
    I_ref = np.einsum("n,nij->ij",
                      wts, (np.einsum("nk,nk->n", d, d)[:, None, None] * np.eye(3)
                            - np.einsum("ni,nj->nij", d, d)))

    assert abs(m - m_ref) < 1e-9
    np.testing.assert_allclose(com, com_ref, atol=1e-6)
    scale = np.abs(np.diag(I_ref)).max()
    assert np.abs(I - I_ref).max() / scale < 0.005
