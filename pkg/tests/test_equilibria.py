import math
from fractions import Fraction

import numpy as np
import pytest

from lorenz_atlas.equilibria import (LocalChart, LorenzParams, boundary_arcs, certify_eigendata, check_resonances,
                                     find_equilibria, invariance_residual, lorenz_field, polygon_nodes,
                                     solve_homological, validate_local_chart)
from lorenz_atlas.errors import DomainError, ResonanceError, UsageError
from lorenz_atlas.interval import Ball

SQRT72 = math.sqrt(72.0)


def test_classical_equilibria(params):
    eq = find_equilibria(params)
    np.testing.assert_array_equal(eq["origin"], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(eq["p+"], [SQRT72, SQRT72, 27.0], rtol=1e-15)
    np.testing.assert_allclose(eq["p-"], [-SQRT72, -SQRT72, 27.0], rtol=1e-15)


def test_unit_equilibrium():
    np.testing.assert_array_equal(find_equilibria(LorenzParams(10, 2, 1))["p+"], [1.0, 1.0, 1.0])


def test_rho_below_one_has_no_outer_equilibria():
    with pytest.raises(DomainError):
        certify_eigendata(LorenzParams(10, "1/2", 1), "p+", "unstable")


def test_origin_eigenvalues(params):
    eq = certify_eigendata(params, "origin", "stable")
    values = sorted((e.value_re for e in eq.eigenpairs), key=lambda iv: iv.lo)
    fast, slow, unstable = values
    assert slow.contains(Fraction(-8, 3))
    assert unstable.subset(type(unstable)(11.82772345116345 - 1e-12, 11.82772345116347 + 1e-12))
    assert fast.subset(type(fast)(-22.82772345116347 - 1e-12, -22.82772345116345 + 1e-12))
    # the two stable values are selected, slow one first
    assert eq.eigenpairs[eq.pair[0]].value_re.contains(-8 / 3)


def test_pplus_unstable_pair(params):
    eq = certify_eigendata(params, "p+", "unstable")
    lam = eq.eigenpairs[eq.pair[0]]
    assert lam.is_complex
    assert abs(lam.value_re.mid - 0.0940) < 5e-5
    assert abs(abs(lam.value_im.mid) - 10.1945) < 5e-5


def test_wrong_dimension_is_a_usage_error(params):
    with pytest.raises(UsageError):
        certify_eigendata(params, "origin", "unstable")


def test_no_resonance_at_order_fifty(origin_chart):
    rep = origin_chart.resonance
    assert rep.resonance_free
    assert rep.admissible(0.009)


def test_equal_eigenvalues_not_resonant():
    lam = Ball(np.array(-1.0))
    rep = check_resonances(lam, lam, Ball(np.array(5.0)), 6)
    assert rep.resonance_free


def test_constructed_resonance_is_flagged():
    with pytest.raises(ResonanceError):
        check_resonances(Ball(np.array(-1.0)), Ball(np.array(-2.0)), Ball(np.array(5.0)), 6)


def test_first_order_chart(params):
    eq = certify_eigendata(params, "origin", "stable", (15.0, 1.5))
    ch = solve_homological(eq, 1)
    c = ch.coeffs.mid
    np.testing.assert_array_equal(c[:, 0, 0], [0.0, 0.0, 0.0])
    for k, (i, j) in enumerate(((1, 0), (0, 1))):
        v = c[:, i, j]
        assert abs(np.linalg.norm(v) - eq.scalings[k]) < 1e-12
        J = eq.jacobian.mid()
        lam = eq.eigenpairs[eq.pair[k]].value_re.mid
        np.testing.assert_allclose(J @ v, lam * v, atol=1e-12)


def test_invariance_residual_small(origin_chart):
    rng = np.random.default_rng(3)
    s = rng.uniform(-1, 1, (2, 25))
    res = invariance_residual(origin_chart, s[0], s[1])
    assert np.abs(res).max() < 1e-10


def test_chart_passes_through_equilibrium(origin_chart, params):
    p0 = origin_chart.evaluate(0.0, 0.0)
    np.testing.assert_array_equal(lorenz_field(p0, params), [0.0, 0.0, 0.0])


def test_origin_validation(origin_chart):
    assert origin_chart.r_hat <= 1e-18
    assert 0.6 <= origin_chart.bounds.Z1 <= 0.8


def test_linear_chart_has_machine_level_defect(params):
    eq = certify_eigendata(params, "origin", "stable", (0.15, 0.015))
    full = solve_homological(eq, 8)
    mid = np.zeros_like(full.coeffs.mid)
    mid[:, :2, :2] = full.coeffs.mid[:, :2, :2]
    mid[:, 1, 1] = 0.0
    ch = LocalChart(Ball(mid), full.lambdas, full.scalings, False, full.point, eq=eq)
    # the square of a first-order chart has degree 2 <= N, so there is no tail defect
    b = validate_local_chart(ch)
    assert b.Y0 < 1e-300 and ch.r_hat < 1e-300


def test_smaller_scalings_shrink_bounds(params):
    def bounds(scale):
        eq = certify_eigendata(params, "origin", "stable", (15.0 * scale, 1.5 * scale))
        ch = solve_homological(eq, 50)
        return validate_local_chart(ch)

    big, small = bounds(1.0), bounds(0.1)
    assert small.Y0 < big.Y0 and small.Z1 < big.Z1


def test_conjugate_symmetry(params):
    eq = certify_eigendata(params, "p+", "unstable", (0.5, 0.5))
    c = solve_homological(eq, 12).coeffs.mid
    np.testing.assert_allclose(c, np.conj(np.swapaxes(c, 1, 2)), atol=1e-14)


def test_square_boundary_of_identity_chart():
    mid = np.zeros((3, 3, 3))
    mid[0, 1, 0] = 1.0
    mid[1, 0, 1] = 1.0
    ch = LocalChart(Ball(mid), (Ball(np.array(-1.0)), Ball(np.array(-2.0))), (1.0, 1.0), False,
                    np.zeros(3), r_hat=0.0)
    arcs = boundary_arcs(ch, mesh="square")
    assert len(arcs) == 8
    corners = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)]
    for k, a in enumerate(arcs):
        u, v = corners[k], corners[(k + 1) % 8]
        np.testing.assert_allclose(a.coeffs[:2, 0], np.add(u, v) / 2, atol=1e-15)
        np.testing.assert_allclose(a.coeffs[:2, 1], np.subtract(v, u) / 2, atol=1e-15)
        assert not a.coeffs[:, 2:].any() and not a.coeffs[2].any()


def test_twenty_gon_nodes():
    nodes = polygon_nodes(20, radius=1.0)
    for j, (x, y) in enumerate(nodes):
        assert abs(x - math.cos(math.pi * j / 10)) < 1e-15
        assert abs(y - math.sin(math.pi * j / 10)) < 1e-15


def test_default_polygon_chords_have_unit_norm():
    nodes = [complex(x, y) for x, y in polygon_nodes(20)]
    for a, b in zip(nodes, nodes[1:] + nodes[:1]):
        assert abs((a + b) / 2) + abs((b - a) / 2) <= 1.0


def test_lifted_arc_endpoints_match_chart(origin_chart, origin_arcs):
    P = np.polynomial.polynomial
    corners = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)]
    for k, a in enumerate(origin_arcs):
        for s, corner in ((-1.0, corners[k]), (1.0, corners[(k + 1) % 8])):
            end = np.array([P.polyval(s, c) for c in a.coeffs])
            ref = origin_chart.evaluate(*corner)
            assert np.abs(end - ref).max() <= a.error + 1e-12


def test_complex_arc_endpoints_match_chart(params):
    from lorenz_atlas.equilibria import local_chart

    ch = local_chart(params, "p+", "unstable", 20, scalings=(0.1, 0.1))
    arcs = boundary_arcs(ch, mesh="polygon", k=20)
    nodes = polygon_nodes(20)
    P = np.polynomial.polynomial
    for k, a in enumerate(arcs):
        end = np.array([P.polyval(-1.0, c) for c in a.coeffs])
        assert np.abs(end - ch.evaluate(*nodes[k])).max() <= a.error + 1e-12
