import math

import numpy as np
import pytest
from scipy.optimize import linprog

from constraintnet import autodiff as ad
from constraintnet.constraints import (
    IntervalSampler,
    Polytope,
    Product,
    SchemaEntry,
    Sector,
    SectorSampler,
    TriangleSampler,
    constraint_from_dict,
    polytope_contains,
    sample_valid_s,
    sector_contains,
)
from constraintnet.gradcheck import check_jacobian


def lp_contains(vertices, y, tol=1e-9):
    """Independent oracle: is y a convex combination of the vertices (LP feasibility)?"""
    v = np.asarray(vertices, dtype=np.float64)
    n = len(v)
    # minimise slack t subject to |V^T w - y| <= t, w >= 0, sum w = 1
    d = v.shape[1]
    c = np.r_[np.zeros(n), 1.0]
    A_ub = np.block([[v.T, -np.ones((d, 1))], [-v.T, -np.ones((d, 1))]])
    b_ub = np.r_[y, -np.asarray(y)]
    A_eq = np.r_[np.ones(n), 0.0][None]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=[(0, None)] * (n + 1), method="highs")
    return res.status == 0 and res.fun <= tol


def polar_inside(xc, yc, R, psi, p, margin):
    """Independent sector oracle with a strict margin, angle from the +y axis."""
    dx, dy = p[0] - xc, p[1] - yc
    rho = math.hypot(dx, dy)
    ang = abs(math.atan2(dx, dy))
    return rho <= R - margin and ang <= psi / 2 - margin


def polar_outside(xc, yc, R, psi, p, margin):
    dx, dy = p[0] - xc, p[1] - yc
    rho = math.hypot(dx, dy)
    ang = abs(math.atan2(dx, dy))
    # outside the disc, or outside the wedge far enough that no angular slack reaches it
    return rho >= R + margin or (rho > margin and ang >= psi / 2 + margin and psi < 2 * math.pi - 2 * margin)


CLASSES = [
    Polytope(2, 1),
    Polytope(3, 2),
    Polytope(5, 2),
    Polytope(4, 3),
    Polytope(5, 3, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 0, 1], [1, 1, 1]],
             (SchemaEntry("l", 0, 32), SchemaEntry("u", 0, 32))),
    Sector(),
    Product([Polytope(2, 1), Polytope(3, 2), Sector()], output_order=[4, 0, 1, 3, 2]),
]


@pytest.mark.parametrize("c", CLASSES, ids=lambda c: repr(c)[:40])
def test_guard_output_is_member(c, rng):
    z = rng.normal(size=(2000, c.z_dim)) * rng.choice([0.1, 1, 10, 100], size=(2000, 1))
    s = c.random_s(rng, 2000)
    y = c.guard(z, s).data
    assert y.shape == (2000, c.out_dim)
    assert all(c.member(y[i], s[i]) for i in range(2000))


@pytest.mark.parametrize("c", CLASSES, ids=lambda c: repr(c)[:40])
def test_guard_jacobian(c, rng):
    for _ in range(5):
        s = c.random_s(rng)
        z = rng.normal(size=c.z_dim)
        assert check_jacobian(lambda t: c.guard(t, s), z) < 1e-5


@pytest.mark.parametrize("c", CLASSES, ids=lambda c: repr(c)[:40])
def test_dict_round_trip(c):
    back = constraint_from_dict(c.to_dict())
    assert back == c
    assert back.to_dict() == c.to_dict()


def test_single_sample_and_batch_agree(rng):
    c = Polytope(4, 2)
    z = rng.normal(size=(3, 4))
    s = c.random_s(rng, 3)
    batch = c.guard(z, s).data
    for i in range(3):
        np.testing.assert_array_equal(c.guard(z[i], s[i]).data.reshape(-1), batch[i])


def test_single_s_broadcasts(rng):
    c = Polytope(3, 2)
    s = c.random_s(rng)
    batch = c.guard(rng.normal(size=(4, 3)), s).data
    assert batch.shape == (4, 2)


def test_polytope_shape_error(rng):
    c = Polytope(3, 2)
    with pytest.raises(ValueError):
        c.guard(rng.normal(size=4), c.random_s(rng))
    with pytest.raises(ValueError):
        c.guard(rng.normal(size=3), np.zeros(5))


@pytest.mark.parametrize("dim,n", [(1, 2), (1, 4), (2, 3), (2, 6), (3, 4), (3, 7), (4, 6)])
def test_polytope_contains_matches_lp(dim, n, rng):
    for _ in range(60):
        v = rng.uniform(-5, 5, size=(n, dim))
        y = rng.uniform(-6, 6, size=dim)
        expected = lp_contains(v, y, 1e-7)
        # skip points within 1e-6 of the boundary where either answer is defensible
        if expected != lp_contains(v, y, 1e-5):
            continue
        assert polytope_contains(v, y, 1e-9) == expected


def test_polytope_contains_vertices_and_centroid(rng):
    for dim, n in [(1, 2), (2, 3), (3, 5), (5, 7)]:
        v = rng.normal(size=(n, dim))
        for vi in v:
            assert polytope_contains(v, vi)
        assert polytope_contains(v, v.mean(axis=0))


def test_polytope_contains_degenerate():
    seg = np.array([[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])
    assert polytope_contains(seg, [0.5, 0.5])
    assert not polytope_contains(seg, [0.5, 0.6])
    pt = np.array([[1.0, 1.0, 1.0]] * 4)
    assert polytope_contains(pt, [1.0, 1.0, 1.0])
    assert not polytope_contains(pt, [1.0, 1.0, 1.1])
    flat = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    assert polytope_contains(flat, [0.5, 0.5, 0.0])
    assert not polytope_contains(flat, [0.5, 0.5, 0.01])


def test_sector_contains_matches_polar(rng):
    checked = 0
    for _ in range(3000):
        xc, yc = rng.uniform(-5, 5, 2)
        R = rng.uniform(0.5, 5)
        psi = rng.uniform(0.1, 2 * math.pi)
        p = rng.uniform(-10, 10, 2)
        if polar_inside(xc, yc, R, psi, p, 1e-6):
            assert sector_contains(xc, yc, R, psi, p)
            checked += 1
        elif polar_outside(xc, yc, R, psi, p, 1e-6):
            assert not sector_contains(xc, yc, R, psi, p)
            checked += 1
    assert checked > 2500


def test_sector_extremes():
    assert sector_contains(0, 0, 0, 1.0, [0, 0])
    assert not sector_contains(0, 0, 0, 1.0, [0, 0.1])
    # full disc
    assert sector_contains(0, 0, 1, 2 * math.pi, [0, -0.999])
    # zero-angle sector is the vertical segment above the centre
    assert sector_contains(0, 0, 1, 0.0, [0, 0.7])
    assert not sector_contains(0, 0, 1, 0.0, [0.1, 0.7])


def test_sector_guard_geometry():
    c = Sector()
    s = np.array([1.0, 2.0, 3.0, math.pi])
    # z = (+inf-ish, 0): full radius, centre angle -> straight up
    y = c.guard(np.array([50.0, 0.0]), s).data.reshape(-1)
    np.testing.assert_allclose(y, [1.0, 5.0], atol=1e-12)
    # z2 large: angle Psi/2 to the right
    y = c.guard(np.array([50.0, 50.0]), s).data.reshape(-1)
    np.testing.assert_allclose(y, [4.0, 2.0], atol=1e-12)


def test_product_output_order(rng):
    a, b = Polytope(2, 1), Polytope(3, 2)
    plain = Product([a, b])
    perm = Product([a, b], output_order=[2, 0, 1])
    z = rng.normal(size=plain.z_dim)
    s = plain.random_s(rng)
    y_plain = plain.guard(z, s).data.reshape(-1)
    y_perm = perm.guard(z, s).data.reshape(-1)
    # output j is concatenated component order[j]
    np.testing.assert_allclose(y_perm, y_plain[[2, 0, 1]])
    np.testing.assert_allclose(perm.regroup(y_plain), y_perm)
    np.testing.assert_allclose(perm.ungroup(y_perm), y_plain)


def test_product_rejects_bad_order():
    with pytest.raises(ValueError):
        Product([Polytope(2, 1), Polytope(2, 1)], output_order=[0, 0])


def test_samplers_contain_target(rng):
    interval = Polytope(2, 1)
    tri = Polytope(3, 2)
    sec = Sector()
    for _ in range(2000):
        y1 = rng.uniform(-5, 5, 1)
        assert interval.member(y1, IntervalSampler(0.5, 3)(y1, rng))
        y2 = rng.uniform(-5, 5, 2)
        assert tri.member(y2, TriangleSampler()(y2, rng))
        s = SectorSampler()(y2, rng)
        assert sec.member(y2, s)


def test_sample_valid_s_checks(rng):
    c = Polytope(2, 1)
    y = np.array([1.0])
    s = sample_valid_s(y, IntervalSampler(0.1, 1.0), rng)
    assert c.member(y, s)


def test_integer_interval_sampler(rng):
    y = np.array([3.3])
    for _ in range(200):
        lo, hi = IntervalSampler(2, 6, integer=True)(y, rng)
        assert round(3.3 - lo, 9) in {2.0, 3.0, 4.0, 5.0, 6.0}
        assert round(hi - 3.3, 9) in {2.0, 3.0, 4.0, 5.0, 6.0}


def test_random_s_within_schema(rng):
    c = Sector()
    s = c.random_s(rng, 1000)
    for j, entry in enumerate(c.s_schema):
        assert s[:, j].min() >= entry.lo and s[:, j].max() <= entry.hi


def test_guard_is_parameter_free(rng):
    c = Polytope(3, 2)
    z = ad.Tensor(rng.normal(size=3), requires_grad=True)
    s = c.random_s(rng)
    with ad.Tape() as tape:
        tape.backward(ad.tsum(c.guard(z, s)))
    assert z.grad is not None and z.grad.shape == (3,)
