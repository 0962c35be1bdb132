"""Truncated Taylor coefficient sequences and the linear operators on them.

A :class:`MultiSeries` holds ``n`` component grids of coefficients. The grid
axes are the series variables (one or two of them). Two index sets are
supported: rectangular boxes ``0 <= idx_k <= deg_k`` (space-time data) and
total-degree simplices ``|alpha| <= N`` (local manifold charts), the latter
stored in a square grid whose entries above the anti-diagonal are zero.

Norms are the weighted-free l1 norm per component, maximised over the
components.
"""

from __future__ import annotations

from fractions import Fraction
from math import comb

import numpy as np

from . import kernels
from .errors import DomainError, UsageError
from .interval import U, Ball, ball_matvec, gamma, inflate

BOX = "box"
SIMPLEX = "simplex"


class MultiSeries:
    """Immutable truncated series with ``n`` components.

    ``coeffs`` has shape ``(n, *grid)``; ``grid`` has one axis per variable.
    """

    __slots__ = ("coeffs", "index_set")

    def __init__(self, coeffs, index_set: str = BOX):
        c = np.array(coeffs)
        if not (np.issubdtype(c.dtype, np.floating) or np.issubdtype(c.dtype, np.complexfloating)):
            c = c.astype(float)
        if c.ndim < 2:
            raise UsageError("coefficients need shape (n, *grid)")
        if index_set not in (BOX, SIMPLEX):
            raise UsageError(f"unknown index set {index_set!r}")
        if index_set == SIMPLEX:
            if c.ndim != 3 or c.shape[1] != c.shape[2]:
                raise UsageError("simplex series need a square two-variable grid")
            c = c * simplex_mask(c.shape[1] - 1)
        if not np.all(np.isfinite(c)):
            raise DomainError("non-finite coefficient")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "index_set", index_set)

    def __setattr__(self, name, value):
        raise AttributeError("MultiSeries is immutable")

    @classmethod
    def zeros(cls, n: int, degrees, index_set: str = BOX) -> "MultiSeries":
        return cls(np.zeros((n,) + tuple(d + 1 for d in degrees)), index_set)

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    @property
    def dims(self) -> int:
        return self.coeffs.ndim - 1

    @property
    def degrees(self) -> tuple:
        return tuple(s - 1 for s in self.coeffs.shape[1:])

    def component(self, i: int) -> np.ndarray:
        return self.coeffs[i]

    def __add__(self, other: "MultiSeries") -> "MultiSeries":
        _same_shape(self, other)
        return MultiSeries(self.coeffs + other.coeffs, self.index_set)

    def __sub__(self, other: "MultiSeries") -> "MultiSeries":
        _same_shape(self, other)
        return MultiSeries(self.coeffs - other.coeffs, self.index_set)

    def __mul__(self, scalar) -> "MultiSeries":
        return MultiSeries(self.coeffs * scalar, self.index_set)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        return (isinstance(other, MultiSeries) and self.index_set == other.index_set
                and self.coeffs.shape == other.coeffs.shape
                and bool(np.array_equal(self.coeffs, other.coeffs)))

    def __repr__(self) -> str:
        return f"MultiSeries(n={self.n}, degrees={self.degrees}, index_set={self.index_set!r})"


def simplex_mask(N: int) -> np.ndarray:
    i, j = np.indices((N + 1, N + 1))
    return (i + j) <= N


def _same_shape(a: MultiSeries, b: MultiSeries) -> None:
    if a.coeffs.shape != b.coeffs.shape:
        raise UsageError(f"shape mismatch {a.coeffs.shape} vs {b.coeffs.shape}")


def _grid(x) -> np.ndarray:
    return x.coeffs if isinstance(x, MultiSeries) else np.asarray(x)


# ---------------------------------------------------------------------------
# products and norms


def cauchy_product(a, b, degrees=None):
    """Discrete convolution of two coefficient grids.

    ``a`` and ``b`` are grids with the same number of axes (one per
    variable), or single-component MultiSeries. The output degree defaults
    to the sum of the input degrees.
    """
    ga, gb = _grid(a), _grid(b)
    if isinstance(a, MultiSeries):
        if a.n != 1:
            raise UsageError("cauchy_product acts on single components")
        ga = ga[0]
    if isinstance(b, MultiSeries):
        if b.n != 1:
            raise UsageError("cauchy_product acts on single components")
        gb = gb[0]
    if ga.ndim != gb.ndim:
        raise UsageError("dimension mismatch in cauchy_product")
    if degrees is None:
        degrees = tuple(p + q - 2 for p, q in zip(ga.shape, gb.shape))
    shape = tuple(d + 1 for d in degrees)
    if ga.ndim == 1:
        out = np.convolve(ga, gb)[: shape[0]]
        res = np.zeros(shape, dtype=out.dtype)
        res[: out.shape[0]] = out
    elif ga.ndim == 2:
        if np.iscomplexobj(ga) or np.iscomplexobj(gb):
            re = kernels.conv2_trunc(np.ascontiguousarray(ga.real), np.ascontiguousarray(gb.real), *shape)
            re -= kernels.conv2_trunc(np.ascontiguousarray(ga.imag), np.ascontiguousarray(gb.imag), *shape)
            im = kernels.conv2_trunc(np.ascontiguousarray(ga.real), np.ascontiguousarray(gb.imag), *shape)
            im += kernels.conv2_trunc(np.ascontiguousarray(ga.imag), np.ascontiguousarray(gb.real), *shape)
            res = re + 1j * im
        else:
            res = kernels.conv2_trunc(np.ascontiguousarray(ga, dtype=float),
                                      np.ascontiguousarray(gb, dtype=float), *shape)
    else:
        raise UsageError("only one or two variables are supported")
    if isinstance(a, MultiSeries):
        return MultiSeries(res[None], a.index_set if a.index_set == BOX else BOX)
    return res


def ell1_norm(u, certified: bool = False) -> float:
    """max over components of the sum of absolute coefficients."""
    g = _grid(u)
    if not isinstance(u, MultiSeries):
        g = g[None]
    a = np.abs(g).reshape(g.shape[0], -1)
    s = a.sum(axis=1)
    if certified:
        s = inflate(s, a.shape[1])
    return float(s.max()) if s.size else 0.0


def component_norms(u, certified: bool = False) -> np.ndarray:
    g = _grid(u)
    a = np.abs(g).reshape(g.shape[0], -1)
    s = a.sum(axis=1)
    return inflate(s, a.shape[1]) if certified else s


def split(u: MultiSeries, cutoff) -> tuple[MultiSeries, MultiSeries]:
    """Finite part (indices within ``cutoff``) and tail (everything else)."""
    cutoff = tuple(cutoff)
    if len(cutoff) != u.dims:
        raise UsageError("cutoff needs one entry per variable")
    if any(c > d or c < 0 for c, d in zip(cutoff, u.degrees)):
        raise UsageError("cutoff exceeds stored degrees")
    sl = (slice(None),) + tuple(slice(0, c + 1) for c in cutoff)
    fin = np.zeros_like(u.coeffs)
    fin[sl] = u.coeffs[sl]
    return MultiSeries(fin, u.index_set), MultiSeries(u.coeffs - fin, u.index_set)


def apply_eta(u: MultiSeries) -> MultiSeries:
    """Shift the first (time) index up by one; the grid grows by one slice."""
    shape = list(u.coeffs.shape)
    shape[1] += 1
    c = np.zeros(shape, dtype=u.coeffs.dtype)
    c[:, 1:] = u.coeffs
    return MultiSeries(c, u.index_set)


def apply_deriv(u: MultiSeries) -> MultiSeries:
    """Scale the time slice m by m for m >= 1, leave m = 0 untouched."""
    m = np.arange(u.coeffs.shape[1], dtype=float)
    m[0] = 1.0
    shape = (1, -1) + (1,) * (u.dims - 1)
    return MultiSeries(u.coeffs * m.reshape(shape), u.index_set)


def apply_Ta(a: MultiSeries, u: MultiSeries) -> MultiSeries:
    """Componentwise ``a * u`` truncated to the grid of ``u``."""
    if a.dims != u.dims:
        raise UsageError("dimension mismatch")
    if a.n not in (1, u.n):
        raise UsageError("component count mismatch")
    out = []
    for i in range(u.n):
        ai = a.coeffs[0 if a.n == 1 else i]
        out.append(cauchy_product(ai, u.coeffs[i], u.degrees))
    return MultiSeries(np.stack(out), u.index_set)


# ---------------------------------------------------------------------------
# block operators

TAIL_IDENTITY = "identity"
TAIL_DERIV = "deriv"
TAIL_INV_DERIV = "inv_deriv"
TAIL_ZERO = "zero"


class BlockOperator:
    """n x n grid of finite blocks acting on flattened coefficient vectors.

    ``tail`` describes the diagonal action beyond the truncation; ``cut`` is
    the first time index of that tail (M + 1), needed for the 1/m and m
    rules.
    """

    def __init__(self, blocks, tail: str = TAIL_ZERO, cut: int = 1):
        blocks = [[np.atleast_2d(np.asarray(b, dtype=float)) for b in row] for row in blocks]
        n = len(blocks)
        if any(len(row) != n for row in blocks):
            raise UsageError("block grid must be square")
        for row in blocks:
            if len({b.shape[0] for b in row}) != 1:
                raise UsageError("blocks in one row must share their row count")
        for j in range(n):
            if len({blocks[i][j].shape[1] for i in range(n)}) != 1:
                raise UsageError("blocks in one column must share their column count")
        if tail not in (TAIL_IDENTITY, TAIL_DERIV, TAIL_INV_DERIV, TAIL_ZERO):
            raise UsageError(f"unknown tail rule {tail!r}")
        self.blocks = blocks
        self.tail = tail
        self.cut = cut

    @property
    def n(self) -> int:
        return len(self.blocks)

    @classmethod
    def identity(cls, n: int, size: int) -> "BlockOperator":
        eye, zero = np.eye(size), np.zeros((size, size))
        return cls([[eye if i == j else zero for j in range(n)] for i in range(n)], TAIL_IDENTITY)

    def dense(self) -> np.ndarray:
        return np.block(self.blocks)

    def __matmul__(self, other: "BlockOperator") -> "BlockOperator":
        n = self.n
        blocks = [[sum(self.blocks[i][k] @ other.blocks[k][j] for k in range(n)) for j in range(n)]
                  for i in range(n)]
        return BlockOperator(blocks, _compose_tails(self.tail, other.tail), self.cut)

    def tail_norm(self) -> float:
        if self.tail == TAIL_ZERO:
            return 0.0
        if self.tail == TAIL_IDENTITY:
            return 1.0
        if self.tail == TAIL_INV_DERIV:
            return 1.0 / self.cut
        return float("inf")


def _compose_tails(a: str, b: str) -> str:
    if TAIL_ZERO in (a, b):
        return TAIL_ZERO
    if a == TAIL_IDENTITY:
        return b
    if b == TAIL_IDENTITY:
        return a
    if {a, b} == {TAIL_DERIV, TAIL_INV_DERIV}:
        return TAIL_IDENTITY
    raise UsageError("tail composition not representable")


def block_norm(q: np.ndarray, certified: bool = False) -> float:
    """Operator norm of a single block on l1: the largest column sum."""
    if q.size == 0:
        return 0.0
    cols = np.abs(q).sum(axis=0)
    if certified:
        cols = inflate(cols, q.shape[0])
    return float(cols.max())


def operator_norm(A: BlockOperator, certified: bool = False) -> float:
    """max_i sum_j ||q_ij|| joined with the diagonal tail rule."""
    rows = []
    for row in A.blocks:
        s = sum(block_norm(q, certified) for q in row)
        rows.append(float(inflate(s, A.n)) if certified else s)
    return max(max(rows), A.tail_norm())


# ---------------------------------------------------------------------------
# subinterval restriction and evaluation


def _check_cut(s_star, delta) -> None:
    if not delta > 0:
        raise DomainError("delta must be positive")
    if abs(s_star) + abs(delta) > 1.0:
        raise DomainError("|s_star| + |delta| must not exceed 1")


def recenter_matrix(N: int, s_star: float, delta: float) -> np.ndarray:
    """Float matrix T with [T a]_alpha = sum_k T[alpha, k] a_k."""
    T = np.zeros((N + 1, N + 1))
    for k in range(N + 1):
        for a in range(k + 1):
            T[a, k] = comb(k, a) * delta ** a * s_star ** (k - a)
    return T


def recenter_ball(N: int, s_star: float, delta: float) -> Ball:
    """Enclosure of the recentering matrix, built with ball arithmetic."""
    _check_cut(s_star, delta)
    spow = [Ball(np.array(1.0))]
    dpow = [Ball(np.array(1.0))]
    s, d = Ball(np.array(float(s_star))), Ball(np.array(float(delta)))
    for _ in range(N):
        spow.append(spow[-1] * s)
        dpow.append(dpow[-1] * d)
    mid = np.zeros((N + 1, N + 1))
    rad = np.zeros((N + 1, N + 1))
    for k in range(N + 1):
        for a in range(k + 1):
            e = Ball(np.array(float(comb(k, a)))) * dpow[a] * spow[k - a]
            mid[a, k], rad[a, k] = e.mid, e.rad
    return Ball(mid, rad)


def recenter_rescale(a, s_star: float, delta: float, certified: bool = False):
    """Restrict a one-variable series to ``[s_star - delta, s_star + delta]``.

    In float mode the transformed MultiSeries is returned. In certified mode
    the result is ``(series, radius)``: float coefficients plus a rigorous
    bound on the l1 distance (max over components) to the exact transform.
    """
    _check_cut(s_star, delta)
    g = _grid(a)
    single = not isinstance(a, MultiSeries)
    if single:
        g = g[None]
    if g.ndim != 2:
        raise UsageError("recenter_rescale acts on one-variable series")
    N = g.shape[1] - 1
    if not certified:
        out = g @ recenter_matrix(N, s_star, delta).T
        return out[0] if single else MultiSeries(out, BOX)
    out = np.empty_like(g)
    radius = 0.0
    for i in range(g.shape[0]):
        out[i], err = taylor_shift_exact(g[i], s_star, delta)
        radius = max(radius, err)
    return (out[0] if single else MultiSeries(out, BOX)), radius


def taylor_shift_exact(c: np.ndarray, s_star: float, delta: float) -> tuple[np.ndarray, float]:
    """Coefficients of ``p(s_star + delta * s)`` rounded to nearest, and
    the exact l1 rounding error rounded up.

    Floats are dyadic rationals, so the Horner shift runs exactly in
    rational arithmetic and only the final rounding is measured.
    """
    q = [Fraction(float(v)) for v in c]
    sq, dq = Fraction(float(s_star)), Fraction(float(delta))
    n = len(q)
    for i in range(n - 1):
        for j in range(n - 2, i - 1, -1):
            q[j] += sq * q[j + 1]
    p = Fraction(1)
    vals = np.empty(n)
    err = Fraction(0)
    for k in range(n):
        exact = q[k] * p
        vals[k] = float(exact)
        err += abs(exact - Fraction(vals[k]))
        p *= dq
    e = float(err)
    if Fraction(e) < err:
        e = float(np.nextafter(e, np.inf))
    return vals, e


def evaluate(u, point) -> np.ndarray:
    """Evaluate every component at ``point`` (one coordinate per grid axis)."""
    g = _grid(u)
    if not isinstance(u, MultiSeries):
        g = g[None]
    point = np.atleast_1d(np.asarray(point))
    if point.shape[0] != g.ndim - 1:
        raise UsageError("point needs one coordinate per variable")
    P = np.polynomial.polynomial
    if g.ndim == 2:
        return np.array([P.polyval(point[0], gi) for gi in g])
    if g.ndim == 3:
        return np.array([P.polyval2d(point[0], point[1], gi) for gi in g])
    raise UsageError("only one or two variables are supported")


def ball_conv2(a: Ball, b: Ball, P: int, Q: int) -> Ball:
    """Enclosure of the truncated 2-d Cauchy product of two ball grids."""
    am, bm = a.mid, b.mid
    cplx = np.iscomplexobj(am) or np.iscomplexobj(bm)
    aa, ab = np.ascontiguousarray(np.abs(am)), np.ascontiguousarray(np.abs(bm))
    ra, rb = np.ascontiguousarray(a.rad), np.ascontiguousarray(b.rad)
    if cplx:
        am = am.astype(complex)
        bm = bm.astype(complex)
        ar_, ai_ = np.ascontiguousarray(am.real), np.ascontiguousarray(am.imag)
        br_, bi_ = np.ascontiguousarray(bm.real), np.ascontiguousarray(bm.imag)
        conv = kernels.conv2_trunc
        mid = (conv(ar_, br_, P, Q) - conv(ai_, bi_, P, Q)) + 1j * (conv(ar_, bi_, P, Q) + conv(ai_, br_, P, Q))
    else:
        mid = kernels.conv2_trunc(np.ascontiguousarray(am, dtype=float), np.ascontiguousarray(bm, dtype=float), P, Q)
    n = min(a.shape[0], b.shape[0]) * min(a.shape[1], b.shape[1])
    conv = kernels.conv2_trunc
    absprod = conv(aa, ab, P, Q)
    rad = conv(aa, rb, P, Q) + conv(ra, ab + rb, P, Q) + 2.0 * gamma(n + 6) * absprod
    return Ball(mid, inflate(rad, n + 6))


def _dot2_real(a: np.ndarray, b: np.ndarray):
    return kernels.dot2_matmul(np.ascontiguousarray(a, dtype=float), np.ascontiguousarray(b, dtype=float))


def ball_matmul_dot2(A: Ball, B: Ball) -> Ball:
    """Ball matrix product whose midpoint is computed with compensated sums.

    The rounding part of the radius is ``2u|result| + 2 gamma_n^2 sum|a b|``
    instead of the ``gamma_n sum|a b|`` of plain summation.
    """
    am, bm = A.mid, B.mid
    n = am.shape[-1]
    if np.iscomplexobj(am) or np.iscomplexobj(bm):
        am = am.astype(complex)
        bm = bm.astype(complex)
        lhs = np.concatenate([am.real, -am.imag], axis=1)
        re, abs_re = _dot2_real(lhs, np.concatenate([bm.real, bm.imag], axis=0))
        lhs = np.concatenate([am.real, am.imag], axis=1)
        im, abs_im = _dot2_real(lhs, np.concatenate([bm.imag, bm.real], axis=0))
        mid = re + 1j * im
        rnd = 2.0 * U * (np.abs(re) + np.abs(im)) + 2.0 * gamma(2 * n) ** 2 * (abs_re + abs_im)
        nterms = 2 * n
    else:
        mid, absum = _dot2_real(am, bm)
        rnd = 2.0 * U * np.abs(mid) + 2.0 * gamma(n) ** 2 * absum
        nterms = n
    aa, ab = np.abs(A.mid), np.abs(B.mid)
    rad = aa @ B.rad + A.rad @ (ab + B.rad)
    rad = inflate(rad, n + 2) + inflate(rnd, 4) + nterms * 2.0 ** -1060
    return Ball(mid, rad)


def dot2_rows(a: np.ndarray, b: np.ndarray):
    """Compensated sum over the last axis of ``a * b`` (real arrays).

    Returns ``(value, bound)`` with ``|value - exact| <= bound``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    n = a.shape[-1]
    ah, al = _veltkamp(a)
    bh, bl = _veltkamp(b)
    p = a * b
    pe = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    s = np.zeros(a.shape[:-1])
    c = np.zeros(a.shape[:-1])
    for k in range(n):
        t = s + p[..., k]
        z = t - s
        c = c + (((s - (t - z)) + (p[..., k] - z)) + pe[..., k])
        s = t
    val = s + c
    absum = np.sum(np.abs(p), axis=-1)
    bound = inflate(2.0 * U * np.abs(val) + 2.0 * gamma(n) ** 2 * absum, 4) + n * 2.0 ** -1060
    return val, bound


def _veltkamp(x: np.ndarray):
    t = 134217729.0 * x
    hi = t - (t - x)
    return hi, x - hi
