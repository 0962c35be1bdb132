import math
from fractions import Fraction

import numpy as np
import pytest

from lorenz_atlas.continuation import (Atlas, ClipBox, StepPolicy, SubdivisionPlan, clip, clip_intervals, collapse,
                                       export_tables, fixed_schedule, globalize, sigma_profile, subdivide)
from lorenz_atlas.errors import DomainError, UsageError
from lorenz_atlas.integrator import StepInput, single_step
from lorenz_atlas.reference import flow
from lorenz_atlas.sequences import MultiSeries

SQRT72 = math.sqrt(72.0)
P = np.polynomial.polynomial


def arc_at(g, s):
    return np.array([P.polyval(s, c) for c in np.asarray(g)])


@pytest.fixture(scope="module")
def stable_atlas(origin_chart, origin_arcs, params):
    # small box so that clipping happens within a few steps
    box = ClipBox((-20.0, -20.0, -10.0), (20.0, 20.0, 30.0))
    pol = StepPolicy(N=16, M=24, target_error=1e-12, expected_steps=20)
    return globalize(origin_arcs, -0.05, pol, box, params, origin_chart.error)


def test_collapse_of_equilibrium_chart(params):
    g = np.zeros((3, 9))
    g[:, 0] = [SQRT72, SQRT72, 27.0]
    ch = single_step(StepInput(g, N=8, M=10, params=params))
    arc, r = collapse(ch)
    np.testing.assert_allclose(arc.coeffs, g, atol=1e-14)
    assert r >= ch.r


def test_collapse_sums_time_slices(gamma_b, params):
    ch = single_step(StepInput(gamma_b, N=12, M=16, params=params))
    arc, _ = collapse(ch)
    np.testing.assert_allclose(arc.coeffs, ch.coeffs.sum(axis=1), rtol=1e-14, atol=1e-15)


def test_collapse_against_reference(gamma_b, params):
    ch = single_step(StepInput(gamma_b, N=24, M=39, params=params))
    arc, r = collapse(ch)
    for s in np.linspace(-1, 1, 10):
        ref = flow(arc_at(gamma_b, s), ch.L, params)
        assert np.abs(arc_at(arc.coeffs, s) - ref).max() <= r + 1e-10


def test_plan_covers_interval():
    for plan in (SubdivisionPlan.uniform(4), SubdivisionPlan.uniform(7)):
        ends = [(s - d, s + d) for s, d in plan.cuts]
        assert ends[0][0] == -1.0 and ends[-1][1] == 1.0
        assert all(a[1] == b[0] for a, b in zip(ends, ends[1:]))
        assert all(abs(s) + d <= 1.0 for s, d in plan.cuts)


def test_straight_bundle_gives_uniform_cuts(params):
    # points on the z axis move straight toward the origin with equal contraction
    g = np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 5.0]])
    plan = sigma_profile(g, -0.1, I=64, pieces=4, params=params)
    assert plan.cuts == SubdivisionPlan.uniform(4).cuts


def test_benchmark_cuts_concentrate_in_the_middle(gamma_b, params):
    plan = sigma_profile(gamma_b, 0.25, I=128, pieces=4, params=params)
    widths = [2 * d for _, d in plan.cuts]
    assert widths[1] < 0.5 < widths[0]
    assert widths[2] < 0.5 < widths[3]


def test_sigma_grid_refinement_is_stable(gamma_b, params):
    a = sigma_profile(gamma_b, 0.25, I=64, pieces=4, params=params).breakpoints
    b = sigma_profile(gamma_b, 0.25, I=128, pieces=4, params=params).breakpoints
    width = 2.0 / 4
    assert np.abs(np.subtract(a, b)).max() < 0.02 * width


def test_single_piece_is_identity():
    g = np.random.default_rng(0).standard_normal((3, 6))
    [(child, r)] = subdivide(g, 1e-13, SubdivisionPlan(np.array([]), np.array([]), [(0.0, 1.0)], 1))
    np.testing.assert_array_equal(child.coeffs, g)
    assert r == 1e-13


def test_affine_midpoint_split(gamma_b):
    left, right = subdivide(gamma_b, 0.0, SubdivisionPlan.uniform(2))
    np.testing.assert_allclose(arc_at(left[0].coeffs, -1.0), arc_at(gamma_b, -1.0), atol=1e-15)
    np.testing.assert_allclose(arc_at(left[0].coeffs, 1.0), arc_at(gamma_b, 0.0), atol=1e-15)
    np.testing.assert_allclose(arc_at(right[0].coeffs, 1.0), arc_at(gamma_b, 1.0), atol=1e-15)


def test_random_arc_subdivision_pointwise():
    g = np.random.default_rng(1).standard_normal((3, 21))
    plan = SubdivisionPlan.uniform(4)
    pieces = subdivide(g, 0.0, plan)
    for (s_star, delta), (child, r) in zip(plan.cuts, pieces):
        for s in np.linspace(-1, 1, 50):
            d = np.abs(arc_at(child.coeffs, s) - arc_at(g, s_star + delta * s)).max()
            assert d <= r + 1e-13


def test_bad_cut_rejected():
    with pytest.raises(DomainError):
        subdivide(np.ones((3, 3)), 0.0, SubdivisionPlan(np.array([]), np.array([]), [(0.5, 0.75)], 1))


BOX = ClipBox((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def test_clip_inside_and_outside():
    inside = np.array([[0.0, 0.5], [0.0, 0.0], [0.0, 0.0]])
    [(child, r)] = clip(inside, 0.0, BOX)
    np.testing.assert_array_equal(child.coeffs, inside)
    outside = np.array([[5.0, 0.5], [0.0, 0.0], [0.0, 0.0]])
    assert clip(outside, 0.0, BOX) == []


def test_clip_crossing_once():
    g = np.array([[0.5, 1.0], [0.0, 0.0], [0.0, 0.0]])  # x = 0.5 + s leaves at s = 0.5
    [(lo, hi)] = clip_intervals(g, 0.0, BOX, samples=257)
    assert lo == -1.0
    assert 0.5 - 2.0 / 256 <= hi <= 0.5
    [(child, r)] = clip(g, 0.0, BOX)
    assert arc_at(child.coeffs, 1.0)[0] <= 1.0


def test_clip_inflates_by_error():
    g = np.array([[0.5, 1.0], [0.0, 0.0], [0.0, 0.0]])
    [(_, hi)] = clip_intervals(g, 0.25, BOX)
    assert hi <= 0.25 + 1e-9


def test_clip_box_validation():
    with pytest.raises(UsageError):
        ClipBox((0.0, 0.0, 0.0), (1.0, -1.0, 1.0))


def test_error_sequence_nondecreasing(stable_atlas):
    seq = stable_atlas.error_sequence()
    assert all(b >= a for a, b in zip(seq, seq[1:]))
    assert stable_atlas.complete


def test_siblings_partition_their_parent(stable_atlas):
    atlas = stable_atlas
    assert atlas.retired, "the small box should clip something"
    groups = {}
    for c in atlas.charts:
        groups.setdefault((c.parent_id, c.root), []).append(c.s_range)
    for rt in atlas.retired:
        groups.setdefault((rt.parent, rt.root), []).append(rt.s_range)
    by_id = atlas.by_id()
    for (parent, root), ranges in groups.items():
        target = (-1.0, 1.0) if parent is None else by_id[parent].s_range
        ranges = sorted(ranges)
        assert ranges[0][0] == target[0] and ranges[-1][1] == target[1]
        for a, b in zip(ranges, ranges[1:]):
            assert a[1] == b[0]


def test_lineage_times_tile(stable_atlas):
    by_id = stable_atlas.by_id()
    for c in stable_atlas.charts:
        if c.parent_id is None:
            assert c.t0 == 0.0
        else:
            p = by_id[c.parent_id]
            assert c.t0 == pytest.approx(p.t0 + p.L, abs=1e-15)
    children = {c.parent_id for c in stable_atlas.charts}
    clipped = {rt.parent for rt in stable_atlas.retired}
    for c in stable_atlas.charts:
        if c.arc_id not in children and c.arc_id not in clipped:
            assert abs(c.t1) >= 0.05 * (1 - 1e-12)


def test_every_chart_encloses_reference_flow(stable_atlas, origin_arcs, params):
    rng = np.random.default_rng(2)
    for c in stable_atlas.charts:
        lo, hi = c.s_range
        for sig, tau in rng.uniform((-1, 0), (1, 1), (3, 2)):
            s = lo + (sig + 1) * (hi - lo) / 2
            ref = flow(arc_at(origin_arcs[c.root].coeffs, s), c.t0 + tau * c.L, params)
            assert np.abs(ref - c.evaluate(sig, tau)).max() <= c.r + 1e-10


def test_zero_row_of_table(stable_atlas, origin_chart, origin_arcs):
    row = export_tables(stable_atlas, [0.0])[0]
    assert row.charts == len(origin_arcs)
    assert row.error == max([origin_chart.error] + [a.error for a in origin_arcs])


def test_table_rejects_checkpoint_beyond_horizon(stable_atlas):
    with pytest.raises(UsageError):
        export_tables(stable_atlas, [0.5])


def test_equilibrium_arc_atlas(params):
    g = np.zeros((3, 9))
    g[:, 0] = [SQRT72, SQRT72, 27.0]
    atlas = globalize([(g, 0.0)], 0.2, StepPolicy(N=8, M=12), params=params)
    assert [c.generation for c in atlas.charts] == list(range(atlas.chart_count))
    # rounding only: each step adds a few ulps of the largest coordinate
    rs = [c.r for c in atlas.charts]
    assert max(b - a for a, b in zip(rs, rs[1:])) < 4 * math.ulp(27.0)
    assert atlas.charts[-1].t1 == pytest.approx(0.2, abs=1e-15)


def _fingerprint(atlas):
    return [(c.root, c.s_range, c.t0, c.L, c.r, c.coeffs.tobytes()) for c in atlas.charts]


def test_deterministic_and_thread_independent(origin_arcs, origin_chart, params):
    pol = StepPolicy(N=12, M=18, target_error=1e-12, expected_steps=10)
    arcs = origin_arcs[:2]
    a = globalize(arcs, -0.02, pol, params=params, workers=1)
    b = globalize(arcs, -0.02, pol, params=params, workers=1)
    c = globalize(arcs, -0.02, pol, params=params, workers=3)
    assert _fingerprint(a) == _fingerprint(b)
    assert sorted(_fingerprint(a)) == sorted(_fingerprint(c))


def test_thread_env_var(monkeypatch, origin_arcs, params):
    monkeypatch.setenv("LORENZ_ATLAS_THREADS", "nope")
    with pytest.raises(UsageError):
        globalize(origin_arcs[:1], -0.01, StepPolicy(N=8, M=10), params=params)


def test_fixed_schedule_steps(gamma_b, params):
    atlas = fixed_schedule([(gamma_b, 0.0)], 2, pieces=2, policy=StepPolicy(N=12, M=18), params=params)
    assert [c.generation for c in atlas.charts] == [0, 1, 1]
    assert atlas.T == pytest.approx(max(abs(c.t1) for c in atlas.charts))
