"""Outward-rounded interval arithmetic on machine floats.

Three representations live here:

* ``Interval``: an immutable scalar ``[lo, hi]``.
* ``IntervalArray`` / ``IntervalMatrix``: numpy-backed endpoint arrays.
* ``Ball``: numpy-backed midpoint-radius arrays, real or complex, used in
  the vectorized certified kernels.

No rounding-mode control is assumed. Endpoints are pushed one ulp outward
with ``nextafter`` and radii are inflated by explicit error envelopes for
round-to-nearest arithmetic, which over-approximates but never
under-approximates.
"""

from __future__ import annotations

import math
from fractions import Fraction
from numbers import Real

import numpy as np

from .errors import DomainError, IntervalOverflowError, UsageError

U = 2.0 ** -53  # unit roundoff
ETA = 2.0 ** -1074  # smallest subnormal
_INF = math.inf


def up(x: float) -> float:
    return math.nextafter(x, _INF)


def down(x: float) -> float:
    return math.nextafter(x, -_INF)


def gamma(n: int) -> float:
    """Upper bound for n*u/(1 - n*u), the classical rounding constant."""
    nu = n * U
    if nu >= 0.5:
        raise UsageError(f"gamma({n}) is not meaningful in double precision")
    return up(up(nu) / down(1.0 - nu))


def inflate(x, k: int = 1):
    """Upper bound for a non-negative quantity evaluated with k roundings.

    ``x`` is the floating point value of an expression built from
    non-negative terms with at most ``k`` rounded operations; the result
    dominates the exact value of that expression, underflow included.
    """
    factor = 1.0 + 4.0 * (k + 1) * U
    tiny = (k + 1) * 2.0 ** -1060
    if isinstance(x, np.ndarray):
        return x * factor + tiny
    return float(x) * factor + tiny


_SPLITTER = 134217729.0  # 2**27 + 1


def two_sum(a: float, b: float) -> tuple[float, float]:
    """s = fl(a + b) and the exact error a + b - s."""
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def two_prod(a: float, b: float) -> tuple[float, float] | None:
    """p = fl(a * b) and the exact error, or None when it cannot be trusted."""
    p = a * b
    if not math.isfinite(p) or abs(a) > 1e150 or abs(b) > 1e150 or (a != 0.0 and b != 0.0 and abs(p) < 1e-280):
        return None
    t = _SPLITTER * a
    ah = t - (t - a)
    al = a - ah
    t = _SPLITTER * b
    bh = t - (t - b)
    bl = b - bh
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _round_pair(value: float, err: float | None) -> tuple[float, float]:
    # directed roundings of value+err when err is the exact residual
    if err is None:
        return down(value), up(value)
    if err == 0.0:
        return value, value
    if err > 0.0:
        return value, up(value)
    return down(value), value


def add_down(a: float, b: float) -> float:
    return _round_pair(*two_sum(a, b))[0]


def add_up(a: float, b: float) -> float:
    return _round_pair(*two_sum(a, b))[1]


def _mul_pair(a: float, b: float) -> tuple[float, float]:
    tp = two_prod(a, b)
    p = a * b
    if tp is None and p == 0.0 and a != 0.0 and b != 0.0:
        # underflow to zero: the exact product keeps the sign of a * b
        tiny = 5e-324
        return (0.0, tiny) if (a > 0) == (b > 0) else (-tiny, 0.0)
    return _round_pair(p, None if tp is None else tp[1])


def mul_down(a: float, b: float) -> float:
    return _mul_pair(a, b)[0]


def mul_up(a: float, b: float) -> float:
    return _mul_pair(a, b)[1]


def _check(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise IntervalOverflowError("non-finite endpoint in interval computation")


def _check_arr(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise IntervalOverflowError("non-finite entry in certified computation")


def _float_down(q: Fraction) -> float:
    f = float(q)
    return f if Fraction(f) <= q else down(f)


def _float_up(q: Fraction) -> float:
    f = float(q)
    return f if Fraction(f) >= q else up(f)


class Interval:
    """Closed real interval with outward-rounded arithmetic."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo: float, hi: float | None = None):
        lo = float(lo)
        hi = lo if hi is None else float(hi)
        _check(lo, hi)
        if lo > hi:
            raise DomainError(f"empty interval [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def __setattr__(self, name, value):
        raise AttributeError("Interval is immutable")

    # construction -----------------------------------------------------------
    @classmethod
    def exact(cls, value) -> "Interval":
        """Tightest enclosure of an int, float, Fraction or ``'p/q'`` string."""
        if isinstance(value, Interval):
            return value
        if isinstance(value, str):
            value = Fraction(value)
        if isinstance(value, float):
            return cls(value, value)
        q = Fraction(value)
        return cls(_float_down(q), _float_up(q))

    @classmethod
    def hull(cls, *items) -> "Interval":
        ivs = [cls.exact(i) for i in items]
        return cls(min(i.lo for i in ivs), max(i.hi for i in ivs))

    # arithmetic -------------------------------------------------------------
    def __add__(self, other) -> "Interval":
        o = _coerce(other)
        return Interval(add_down(self.lo, o.lo), add_up(self.hi, o.hi))

    __radd__ = __add__

    def __sub__(self, other) -> "Interval":
        o = _coerce(other)
        return Interval(add_down(self.lo, -o.hi), add_up(self.hi, -o.lo))

    def __rsub__(self, other) -> "Interval":
        return _coerce(other) - self

    def __neg__(self) -> "Interval":
        return Interval(-self.hi, -self.lo)

    def __mul__(self, other) -> "Interval":
        o = _coerce(other)
        pairs = ((self.lo, o.lo), (self.lo, o.hi), (self.hi, o.lo), (self.hi, o.hi))
        for x, y in pairs:
            _check(x * y)
        return Interval(min(mul_down(x, y) for x, y in pairs), max(mul_up(x, y) for x, y in pairs))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Interval":
        o = _coerce(other)
        if o.lo <= 0.0 <= o.hi:
            raise DomainError("division by an interval containing zero")
        q = (self.lo / o.lo, self.lo / o.hi, self.hi / o.lo, self.hi / o.hi)
        _check(*q)
        return Interval(down(min(q)), up(max(q)))

    def __rtruediv__(self, other) -> "Interval":
        return _coerce(other) / self

    def __pow__(self, k: int) -> "Interval":
        if not isinstance(k, int) or k < 0:
            raise UsageError("only non-negative integer powers are supported")
        if k == 0:
            return Interval(1.0)
        if k % 2 == 0:
            m = self.mag()
            lo = 0.0 if self.lo <= 0.0 <= self.hi else min(abs(self.lo), abs(self.hi))
            base = Interval(lo, m)
        else:
            base = self
        out = base
        for _ in range(k - 1):
            out = out * base
        return out

    def sqrt(self) -> "Interval":
        if self.hi < 0.0:
            raise DomainError("sqrt of a negative interval")
        lo = max(self.lo, 0.0)
        return Interval(max(down(math.sqrt(lo)), 0.0), up(math.sqrt(self.hi)))

    # queries ----------------------------------------------------------------
    @property
    def mid(self) -> float:
        return 0.5 * self.lo + 0.5 * self.hi

    @property
    def width(self) -> float:
        return up(self.hi - self.lo)

    def mag(self) -> float:
        return max(abs(self.lo), abs(self.hi))

    def mig(self) -> float:
        if self.lo <= 0.0 <= self.hi:
            return 0.0
        return min(abs(self.lo), abs(self.hi))

    def contains(self, x) -> bool:
        if isinstance(x, Interval):
            return self.lo <= x.lo and x.hi <= self.hi
        q = Fraction(x) if not isinstance(x, str) else Fraction(x)
        return Fraction(self.lo) <= q <= Fraction(self.hi)

    __contains__ = contains

    def subset(self, other: "Interval") -> bool:
        return other.lo <= self.lo and self.hi <= other.hi

    def interior_subset(self, other: "Interval") -> bool:
        return other.lo < self.lo and self.hi < other.hi

    def __eq__(self, other) -> bool:
        return isinstance(other, Interval) and self.lo == other.lo and self.hi == other.hi

    def __hash__(self) -> int:
        return hash((self.lo, self.hi))

    def __repr__(self) -> str:
        return f"Interval({self.lo!r}, {self.hi!r})"


def _coerce(x) -> Interval:
    if isinstance(x, Interval):
        return x
    if isinstance(x, (Real, Fraction, str)):
        return Interval.exact(x)
    raise UsageError(f"cannot combine Interval with {type(x).__name__}")


def norm_upper(v) -> float:
    """Rounded-up bound on the sum of magnitudes of a vector of intervals."""
    if isinstance(v, IntervalArray):
        mags = np.maximum(np.abs(v.lo), np.abs(v.hi)).ravel()
    else:
        mags = np.array([_coerce(x).mag() for x in v], dtype=float)
    if mags.size == 0:
        return 0.0
    _check_arr(mags)
    terms = mags.tolist()
    s = math.fsum(terms)  # correctly rounded
    if math.fsum(terms + [-s]) > 0.0:
        s = math.nextafter(s, math.inf)
    return s


# ---------------------------------------------------------------------------
# endpoint arrays


class IntervalArray:
    """Array of intervals stored as endpoint arrays ``lo <= hi``."""

    __array_priority__ = 100

    def __init__(self, lo, hi=None):
        lo = np.array(lo, dtype=float)
        hi = lo.copy() if hi is None else np.array(hi, dtype=float)
        if lo.shape != hi.shape:
            raise UsageError("endpoint arrays differ in shape")
        _check_arr(lo, hi)
        if np.any(lo > hi):
            raise DomainError("empty interval entry")
        self.lo = lo
        self.hi = hi

    @classmethod
    def from_intervals(cls, items) -> "IntervalArray":
        arr = np.asarray(items, dtype=object)
        lo = np.vectorize(lambda i: _coerce(i).lo, otypes=[float])(arr)
        hi = np.vectorize(lambda i: _coerce(i).hi, otypes=[float])(arr)
        return cls(lo, hi)

    @classmethod
    def from_midrad(cls, mid, rad) -> "IntervalArray":
        mid = np.asarray(mid, dtype=float)
        rad = np.asarray(rad, dtype=float)
        return cls(np.nextafter(mid - rad, -np.inf), np.nextafter(mid + rad, np.inf))

    @property
    def shape(self):
        return self.lo.shape

    def __getitem__(self, idx):
        lo, hi = self.lo[idx], self.hi[idx]
        if np.ndim(lo) == 0:
            return Interval(float(lo), float(hi))
        return type(self)(lo, hi)

    def __len__(self):
        return len(self.lo)

    def mid(self) -> np.ndarray:
        return 0.5 * self.lo + 0.5 * self.hi

    def rad(self) -> np.ndarray:
        m = self.mid()
        return np.nextafter(np.maximum(self.hi - m, m - self.lo), np.inf)

    def mag(self) -> np.ndarray:
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def _wrap(self, other):
        if isinstance(other, IntervalArray):
            return other
        if isinstance(other, Interval):
            return IntervalArray(other.lo, other.hi)
        return IntervalArray(other)

    def __add__(self, other):
        o = self._wrap(other)
        return IntervalArray(np.nextafter(self.lo + o.lo, -np.inf), np.nextafter(self.hi + o.hi, np.inf))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._wrap(other)
        return IntervalArray(np.nextafter(self.lo - o.hi, -np.inf), np.nextafter(self.hi - o.lo, np.inf))

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __neg__(self):
        return IntervalArray(-self.hi, -self.lo)

    def __mul__(self, other):
        o = self._wrap(other)
        p = np.stack(np.broadcast_arrays(self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi))
        return IntervalArray(np.nextafter(p.min(axis=0), -np.inf), np.nextafter(p.max(axis=0), np.inf))

    __rmul__ = __mul__

    def __matmul__(self, other):
        o = self._wrap(other)
        return _interval_matmul(self, o)

    def __rmatmul__(self, other):
        return _interval_matmul(self._wrap(other), self)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (self.lo <= x) & (x <= self.hi)

    def interior_subset(self, other: "IntervalArray") -> bool:
        return bool(np.all(other.lo < self.lo) and np.all(self.hi < other.hi))

    def hull(self, other: "IntervalArray") -> "IntervalArray":
        return IntervalArray(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def intersect(self, other: "IntervalArray") -> "IntervalArray":
        return IntervalArray(np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi))

    def __repr__(self):
        return f"{type(self).__name__}(lo={self.lo!r}, hi={self.hi!r})"


class IntervalMatrix(IntervalArray):
    """Rectangular matrix of intervals."""

    def __init__(self, lo, hi=None):
        super().__init__(lo, hi)
        if self.lo.ndim != 2:
            raise UsageError("IntervalMatrix needs a 2-d array")

    @property
    def rows(self) -> int:
        return self.lo.shape[0]

    @property
    def cols(self) -> int:
        return self.lo.shape[1]

    @classmethod
    def identity(cls, n: int) -> "IntervalMatrix":
        return cls(np.eye(n))

    def norm_inf_upper(self) -> float:
        """Rounded-up bound on the max absolute row sum."""
        rows = inflate(np.sum(self.mag(), axis=1), self.cols)
        return float(np.max(rows)) if rows.size else 0.0


def _interval_matmul(a: IntervalArray, b: IntervalArray) -> IntervalArray:
    am, ar = a.mid(), a.rad()
    bm, br = b.mid(), b.rad()
    if am.ndim == 0 or bm.ndim == 0:
        raise UsageError("matmul needs arrays")
    n = am.shape[-1]
    cm = am @ bm
    abs_am, abs_bm = np.abs(am), np.abs(bm)
    rad = abs_am @ br + ar @ (abs_bm + br) + gamma(n + 2) * (abs_am @ abs_bm)
    rad = inflate(rad, n + 2)
    _check_arr(cm, rad)
    out = IntervalArray(np.nextafter(cm - rad, -np.inf), np.nextafter(cm + rad, np.inf))
    if out.lo.ndim == 2:
        return IntervalMatrix(out.lo, out.hi)
    return out


# ---------------------------------------------------------------------------
# midpoint-radius arrays


class Ball:
    """Array of real intervals or complex discs in midpoint-radius form.

    Every entry encloses the set ``{z : |z - mid| <= rad}``. Results of all
    operations enclose the exact results for every choice of points.
    """

    __array_priority__ = 100

    def __init__(self, mid, rad=None):
        mid = np.asarray(mid)
        if not (np.issubdtype(mid.dtype, np.floating) or np.issubdtype(mid.dtype, np.complexfloating)):
            mid = mid.astype(float)
        rad = np.zeros(mid.shape) if rad is None else np.broadcast_to(np.asarray(rad, dtype=float), mid.shape).copy()
        self.mid = mid
        self.rad = rad

    @classmethod
    def from_interval(cls, iv) -> "Ball":
        if isinstance(iv, Interval):
            iv = IntervalArray(iv.lo, iv.hi)
        return cls(iv.mid(), iv.rad())

    @property
    def shape(self):
        return self.mid.shape

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.mid)

    def check(self) -> "Ball":
        _check_arr(np.abs(self.mid), self.rad)
        return self

    def __getitem__(self, idx) -> "Ball":
        return Ball(self.mid[idx], self.rad[idx])

    def copy(self) -> "Ball":
        return Ball(self.mid.copy(), self.rad.copy())

    def mag(self) -> np.ndarray:
        """Upper bound on |z| over each entry."""
        return inflate(np.abs(self.mid) + self.rad, 2)

    def to_interval_array(self) -> IntervalArray:
        if self.is_complex:
            raise UsageError("complex ball has no real interval form")
        return IntervalArray.from_midrad(self.mid, self.rad)

    def _wrap(self, other) -> "Ball":
        if isinstance(other, Ball):
            return other
        if isinstance(other, Interval):
            return Ball.from_interval(other)
        if isinstance(other, IntervalArray):
            return Ball.from_interval(other)
        return Ball(np.asarray(other))

    def _mult_err(self, am, bm):
        # rounding error of a single product: u|ab| for reals, sqrt(5)u|ab| for complex
        c = 3.0 if (np.iscomplexobj(am) or np.iscomplexobj(bm)) else 1.0
        return c * U * (np.abs(am) * np.abs(bm))

    def __add__(self, other) -> "Ball":
        o = self._wrap(other)
        m = self.mid + o.mid
        r = inflate(self.rad + o.rad + U * np.abs(m), 3)
        return Ball(m, r)

    __radd__ = __add__

    def __sub__(self, other) -> "Ball":
        o = self._wrap(other)
        m = self.mid - o.mid
        r = inflate(self.rad + o.rad + U * np.abs(m), 3)
        return Ball(m, r)

    def __rsub__(self, other) -> "Ball":
        return self._wrap(other) - self

    def __neg__(self) -> "Ball":
        return Ball(-self.mid, self.rad)

    def __mul__(self, other) -> "Ball":
        o = self._wrap(other)
        am, bm = self.mid, o.mid
        m = am * bm
        aa, ab = np.abs(am), np.abs(bm)
        r = aa * o.rad + self.rad * (ab + o.rad) + self._mult_err(am, bm)
        return Ball(m, inflate(r, 5))

    __rmul__ = __mul__

    def conj(self) -> "Ball":
        return Ball(np.conj(self.mid), self.rad)

    @property
    def real(self) -> "Ball":
        return Ball(np.real(self.mid).copy(), self.rad)

    @property
    def imag(self) -> "Ball":
        return Ball(np.imag(self.mid).copy(), self.rad)

    def reciprocal(self) -> "Ball":
        """Enclosure of 1/z; every disc must exclude zero."""
        m, r = self.mid, self.rad
        am = np.abs(m)
        m2 = am * am
        r2 = r * r
        d = m2 - r2
        dd = inflate(8 * U * (m2 + r2), 2)  # |exact d - d|
        d_lo = d - dd
        if np.any(d_lo <= 0.0):
            raise DomainError("reciprocal of a ball containing zero")
        # 1/D(m, r) is the disc with centre conj(m)/d and radius r/d
        c = (np.conj(m) if self.is_complex else m) / d
        shift = am * dd / (d_lo * d) + 6 * U * np.abs(c)
        rad = inflate(r / d_lo + shift, 6)
        return Ball(c, rad)

    def __truediv__(self, other) -> "Ball":
        return self * self._wrap(other).reciprocal()

    def __rtruediv__(self, other) -> "Ball":
        return self._wrap(other) * self.reciprocal()

    def sum(self, axis=None) -> "Ball":
        m = np.sum(self.mid, axis=axis)
        n = self.mid.size if axis is None else self.mid.shape[axis]
        a = np.sum(np.abs(self.mid), axis=axis)
        r = np.sum(self.rad, axis=axis) + 2.0 * gamma(n + 2) * a
        return Ball(m, inflate(r, n + 2))

    def __repr__(self) -> str:
        return f"Ball(mid={self.mid!r}, rad={self.rad!r})"


def ball_matvec(A: Ball, x: Ball) -> Ball:
    """Enclosure of A @ x over the last two / last axes (batched)."""
    am, ar = A.mid, A.rad
    xm, xr = x.mid, x.rad
    n = am.shape[-1]
    m = np.einsum("...ij,...j->...i", am, xm)
    aa, ax = np.abs(am), np.abs(xm)
    r = (np.einsum("...ij,...j->...i", aa, xr) + np.einsum("...ij,...j->...i", ar, ax + xr)
         + 2.0 * gamma(n + 4) * np.einsum("...ij,...j->...i", aa, ax))
    return Ball(m, inflate(r, n + 4))


def ball_matmul(A: Ball, B: Ball) -> Ball:
    am, ar = A.mid, A.rad
    bm, br = B.mid, B.rad
    n = am.shape[-1]
    m = am @ bm
    aa, ab = np.abs(am), np.abs(bm)
    r = aa @ br + ar @ (ab + br) + 2.0 * gamma(n + 4) * (aa @ ab)
    return Ball(m, inflate(r, n + 4))
