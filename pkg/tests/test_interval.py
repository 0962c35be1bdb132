import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lorenz_atlas.errors import DomainError
from lorenz_atlas.interval import Ball, Interval, IntervalArray, norm_upper

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def ulp(x):
    return math.ulp(abs(x))


def test_exact_integer_sum():
    r = Interval(1, 1) + Interval(2, 2)
    assert r.contains(3)
    assert 3 - r.lo <= ulp(3) and r.hi - 3 <= ulp(3)


def test_monotone_product():
    r = Interval(-1, 2) * Interval(3, 3)
    assert (r.lo, r.hi) == (-3.0, 6.0)


def test_third_is_enclosed_tightly():
    r = Interval(1, 1) / Interval(3, 3)
    assert Fraction(r.lo) <= Fraction(1, 3) <= Fraction(r.hi)
    assert r.hi - r.lo <= 2 * ulp(1 / 3)


def test_empty_interval_rejected():
    with pytest.raises(DomainError):
        Interval(2, 1)


def test_division_by_zero_interval():
    with pytest.raises(DomainError):
        Interval(1) / Interval(-1, 1)


def test_exact_fraction_enclosure():
    r = Interval.exact("8/3")
    assert Fraction(r.lo) <= Fraction(8, 3) <= Fraction(r.hi)
    assert r.hi == math.nextafter(r.lo, math.inf)


def test_norm_upper_examples():
    assert norm_upper([Interval(0)]) == 0.0
    v = norm_upper([Interval(1), Interval(-2)])
    assert 3.0 <= v <= 3.0 * (1 + 2.0 ** -52)


def test_norm_upper_dominates_exact_sum():
    rng = np.random.default_rng(7)
    lo = rng.uniform(-10, 10, 1000)
    hi = lo + rng.uniform(0, 1, 1000)
    exact = sum(max(abs(Fraction(a)), abs(Fraction(b))) for a, b in zip(lo, hi))
    got = norm_upper(IntervalArray(lo, hi))
    assert Fraction(got) >= exact
    assert got == math.nextafter(float(exact), math.inf) or Fraction(got) == exact or got == float(exact)


@st.composite
def nested(draw, elements=finite):
    """A point x inside a inside A."""
    a, b, c, d = sorted(draw(st.lists(elements, min_size=4, max_size=4)))
    x = draw(st.floats(b, c)) if b < c else b
    return Interval(a, d), Interval(b, c), x


@given(nested(), nested(), st.sampled_from(["+", "-", "*"]))
def test_inclusion_monotone(p, q, op):
    f = {"+": lambda u, v: u + v, "-": lambda u, v: u - v, "*": lambda u, v: u * v}[op]
    A, a, x = p
    B, b, y = q
    big, small = f(A, B), f(a, b)
    assert small.subset(big)
    exact = f(Fraction(x), Fraction(y))
    assert Fraction(small.lo) <= exact <= Fraction(small.hi)


@given(nested(), nested(st.floats(1e-3, 1e6)), st.booleans())
def test_division_encloses(p, q, negative):
    A, a, x = p
    B, b, y = q
    if negative:
        B, b, y = -B, -b, -y
    small, big = a / b, A / B
    assert small.subset(big)
    exact = Fraction(x) / Fraction(y)
    assert Fraction(small.lo) <= exact <= Fraction(small.hi)


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
def test_ball_product_encloses(u, v):
    a = Ball(np.array(u), np.full(3, 1e-3))
    b = Ball(np.array(v), np.full(3, 1e-3))
    p = a * b
    for x, y, m, r in zip(u, v, p.mid, p.rad):
        exact = Fraction(x) * Fraction(y)
        assert abs(Fraction(float(m)) - exact) <= Fraction(float(r))
