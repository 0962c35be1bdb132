"""One validated Taylor step for the Lorenz flow of a parameterized arc.

A step takes an arc ``a(s)`` (three components, spatial degree ``N``) and
builds the space-time polynomial

    Gamma(s, t) = sum_{m <= M, alpha <= N} a[:, m, alpha] t^m s^alpha,
    t in [0, 1], physical time L * t,

by the Taylor recursion of the rescaled field ``L f``. The zero finding
problem ``F(x) = 0`` on the space-time l1 space is validated with a
Newton-Kantorovich argument:

* the finite part is every time slice ``m <= M`` with *all* spatial orders;
  the tail is ``m > M`` where the approximate inverse acts as ``1/m``;
* on the finite part the approximate inverse is shift invariant in space
  and is generated by the columns ``W[j, k]`` (unit impulse in time slice
  ``j`` of component ``k``), obtained from the variational recursion.

The incoming error of the arc is tracked by an :class:`ErrorLedger`: a list
of matrix valued multipliers ``G_j(s)`` applied to unlocated l1 balls of
radius ``d_j``. Each step left-multiplies the multipliers by the certified
linear propagator, so errors are transported by the actual linearized
flow instead of a product of operator norms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .equilibria import LorenzParams
from .errors import ConditioningError, UsageError, ValidationError
from .interval import U, Ball, gamma, inflate
from .sequences import BOX, BlockOperator, MultiSeries, recenter_ball
from .validation import ValidationBounds, certify

log = logging.getLogger(__name__)

MACHINE_MU = float(np.finfo(float).eps)  # 2.220446049250313e-16
DEFAULT_EPS = 0.6
_TINY = 2.0 ** -1060


# ---------------------------------------------------------------------------
# error ledger


def _toeplitz(v: np.ndarray, rows: int) -> np.ndarray:
    """Lower triangular Toeplitz matrix of the 1-d convolution with ``v``."""
    n = v.shape[-1]
    T = np.zeros(v.shape[:-1] + (rows, n))
    for k in range(n):
        h = min(n, rows - k)
        T[..., k:k + h, k] = v[..., :h]
    return T


def _series_matmul(A: np.ndarray, B: np.ndarray, N: int):
    """Product of matrices of 1-d series, truncated to degree N.

    ``A`` is (3, 3, N+1), ``B`` is (..., 3, 3, N+1). Returns the truncated
    product and a per-entry l1 bound on (exact product - returned value).
    """
    rows = 2 * N + 1
    TA = _toeplitz(A, rows)  # (3, 3, rows, N+1)
    full = np.einsum("ikab,...klb->...ila", TA, B)
    absfull = np.einsum("ikab,...klb->...ila", np.abs(TA), np.abs(B))
    n = 3 * (N + 1) + 2
    rnd = inflate(gamma(n) * absfull.sum(axis=-1), n + rows)
    tail = inflate(np.abs(full[..., N + 1:]).sum(axis=-1), rows)
    return full[..., : N + 1], rnd + tail


def _op_norm(G: np.ndarray) -> float:
    """Operator norm of a 3x3 matrix of series on (l1)^3 with the max norm."""
    s = inflate(np.abs(G).sum(axis=-1), G.shape[-1])
    return float(inflate(s.sum(axis=-1), 3).max())


@dataclass
class ErrorLedger:
    """Incoming error of an arc: ``e = sum_j G_j u_j`` with ``||u_j|| <= d_j``.

    ``None`` in place of ``G_j`` means the identity. The series in each
    ``G_j`` have degree ``N``; truncation and rounding residues are moved
    into a fresh identity entry whenever the multipliers are transformed.
    """

    N: int
    entries: list = field(default_factory=list)
    cap: int = 256

    @classmethod
    def scalar(cls, N: int, r: float) -> "ErrorLedger":
        return cls(N, [(None, float(r))] if r > 0 else [])

    def copy(self) -> "ErrorLedger":
        return ErrorLedger(self.N, list(self.entries), self.cap)

    def component_bounds(self) -> np.ndarray:
        """Upper bounds on ``||e_k||`` for each component k."""
        out = np.zeros(3)
        for G, d in self.entries:
            if G is None:
                out += d
            else:
                rows = inflate(inflate(np.abs(G).sum(axis=-1), G.shape[-1]).sum(axis=-1), 3)
                out += inflate(rows * d, 1)
        return inflate(out, len(self.entries) + 1)

    def total(self) -> float:
        return float(self.component_bounds().max()) if self.entries else 0.0

    def response_bounds(self, W: np.ndarray) -> np.ndarray:
        """Bounds on component i of ``W0 e`` for the impulse response ``W0``.

        ``W`` is the generator array of a step; its first three columns
        answer impulses in time slice 0. Products with each multiplier are
        formed explicitly, so cancellation between them is kept.
        """
        W0 = W[:, :, :, :3]  # (time, i, space, k)
        M1, N1 = W0.shape[0], W0.shape[2]
        out = np.zeros(3)
        eye = 0.0
        Gs, ds = [], []
        for G, d in self.entries:
            if G is None:
                eye += d
            else:
                Gs.append(G)
                ds.append(d)
        if eye:
            out += inflate(inflate(np.abs(W0).sum(axis=(0, 2)), M1 * N1).sum(axis=1), 3) * eye
        if Gs:
            TG = _toeplitz(np.stack(Gs), 2 * N1 - 1)  # (j, k, l, 2N+1, N+1)
            P = np.einsum("miak,jklca->jmilc", W0, TG)
            Pa = np.einsum("miak,jklca->jmilc", np.abs(W0), np.abs(TG))
            n = 3 * N1 + 2
            nrm = inflate(np.abs(P).sum(axis=(1, 4)) + gamma(n) * Pa.sum(axis=(1, 4)), M1 * (2 * N1) + n)
            rows = inflate(nrm.sum(axis=-1), 3)  # (j, i)
            out += inflate(np.asarray(ds) @ rows, len(ds) + 1)
        return inflate(out, 2)

    def _fold(self) -> None:
        # keep the newest entries; older ones lose their structure
        while len(self.entries) > self.cap:
            (G1, d1), (G2, d2) = self.entries[0], self.entries[1]
            n1 = d1 if G1 is None else inflate(_op_norm(G1) * d1, 1)
            n2 = d2 if G2 is None else inflate(_op_norm(G2) * d2, 1)
            self.entries[:2] = [(None, inflate(n1 + n2, 1))]

    def add(self, d: float) -> None:
        if d > 0:
            self.entries.append((None, float(d)))
            self._fold()

    def propagate(self, Mt: np.ndarray, Mt_err: float) -> tuple["ErrorLedger", float]:
        """Left-multiply every multiplier by the propagator ``Mt``.

        ``Mt_err`` bounds the operator norm of (exact propagator sum -
        ``Mt``). Returns the new ledger and the l1 bound that must be added
        as a fresh entry to account for truncation and rounding.
        """
        new = ErrorLedger(self.N, [], self.cap)
        extra = 0.0
        structured = [(i, G) for i, (G, _) in enumerate(self.entries) if G is not None]
        products = {}
        if structured:
            stack = np.stack([G for _, G in structured])
            prod, err = _series_matmul(Mt, stack, self.N)
            for (i, _), P, E in zip(structured, prod, err):
                products[i] = (P, float(inflate(E.sum(axis=-1), 3).max()))
        for i, (G, d) in enumerate(self.entries):
            if G is None:
                new.entries.append((Mt.copy(), d))
                extra += inflate(Mt_err * d, 1)
            else:
                P, e = products[i]
                new.entries.append((P, d))
                extra += inflate((e + Mt_err * _op_norm(G)) * d, 2)
        return new, float(inflate(extra, len(self.entries) + 1))

    def restrict(self, s_star: float, delta: float) -> tuple["ErrorLedger", float]:
        """Restrict every multiplier to ``[s_star - delta, s_star + delta]``."""
        new = ErrorLedger(self.N, [], self.cap)
        extra = 0.0
        if any(G is not None for G, _ in self.entries):
            T = recenter_ball(self.N, s_star, delta)
        for G, d in self.entries:
            if G is None:
                new.entries.append((None, d))
                continue
            mid = np.einsum("ab,ikb->ika", T.mid, G)
            aa = np.abs(T.mid)
            rad = np.einsum("ab,ikb->ika", T.rad, np.abs(G))
            rad = rad + 2.0 * gamma(self.N + 4) * np.einsum("ab,ikb->ika", aa, np.abs(G))
            e = float(inflate(inflate(rad, self.N + 4).sum(axis=-1), self.N + 1).sum(axis=-1).max())
            new.entries.append((mid, d))
            extra += inflate(e * d, 1)
        return new, float(inflate(extra, len(self.entries) + 1))


# ---------------------------------------------------------------------------
# Taylor coefficients and rescaling


def _arc_grid(arc, N: int | None = None) -> np.ndarray:
    g = arc.coeffs if isinstance(arc, MultiSeries) else np.asarray(arc, dtype=float)
    if g.ndim != 2 or g.shape[0] != 3:
        raise UsageError("an arc is a (3, N+1) coefficient grid")
    if N is None:
        return np.ascontiguousarray(g, dtype=float)
    out = np.zeros((3, N + 1))
    k = min(N + 1, g.shape[1])
    out[:, :k] = g[:, :k]
    return out


def taylor_grid(arc, M: int, N: int, L: float, params: LorenzParams) -> np.ndarray:
    """Space-time coefficients as a plain (3, M+1, N+1) array."""
    if M < 1 or N < 0:
        raise UsageError("orders must satisfy M >= 1, N >= 0")
    g = _arc_grid(arc, N)
    s, r, b = params.floats()
    A, B, C = kernels.lorenz_taylor(g[0:1].copy(), g[1:2].copy(), g[2:3].copy(), M, float(L), s, r, b)
    return np.stack([np.asarray(A), np.asarray(B), np.asarray(C)])


def taylor_coeffs(arc, M: int, N: int, L: float, params: LorenzParams | None = None) -> MultiSeries:
    """Taylor recursion of the rescaled Lorenz field started from ``arc``."""
    params = params or LorenzParams.classical()
    return MultiSeries(taylor_grid(arc, M, N, L, params), BOX)


def choose_rescaling(coeffs, M: int, mu: float = MACHINE_MU) -> float:
    """L = (mu / w)^(1/M) with w the l1 norm of the last time slice."""
    g = coeffs.coeffs if isinstance(coeffs, MultiSeries) else np.asarray(coeffs)
    w = float(np.abs(g[:, M]).sum(axis=-1).max())
    if w <= mu:
        return 1.0
    return (mu / w) ** (1.0 / M)


def orders_from_effort(N: int | None = None, eps: float = DEFAULT_EPS, effort: int | None = None) -> tuple[int, int]:
    """(M, N) from a spatial order and eps = M/N, or from effort K = M*N."""
    if N is None:
        if effort is None:
            raise UsageError("need N or an effort")
        N = max(1, int(round(math.sqrt(effort / eps))))
    M = max(1, int(round(eps * N)))
    return M, N


# ---------------------------------------------------------------------------
# rigorous residual


def _param_dev(params: LorenzParams, name: str, value: float) -> float:
    iv = params.interval(name)
    return float(inflate(max(abs(iv.hi - value), abs(value - iv.lo)), 1))


def _dot2_conv(a: np.ndarray, b: np.ndarray, P: int, Q: int) -> Ball:
    val, ab, cnt = kernels.conv2_dot2(np.ascontiguousarray(a), np.ascontiguousarray(b), P, Q)
    val, ab = np.asarray(val), np.asarray(ab)
    n = max(2, int(np.asarray(cnt).max()))
    rad = inflate(2.0 * U * np.abs(val) + 2.0 * gamma(n) ** 2 * ab, 4) + n * _TINY
    return Ball(val, rad)


def _pad(x: np.ndarray, P: int, Q: int) -> np.ndarray:
    out = np.zeros(x.shape[:-2] + (P, Q))
    out[..., : x.shape[-2], : x.shape[-1]] = x
    return out


def residual_grid(coeffs: np.ndarray, arc, L: float, params: LorenzParams,
                  certified: bool = True):
    """F(x) on time orders 0..2M+1 and spatial orders 0..2N.

    ``F_0 = x_0 - arc`` and ``F_m = m x_m - L f(x)_{m-1}``. In certified
    mode a Ball is returned, otherwise a float array.
    """
    x = np.asarray(coeffs, dtype=float)
    _, M1, N1 = x.shape
    M, N = M1 - 1, N1 - 1
    P, Q = 2 * M + 1, 2 * N + 1
    g0 = _arc_grid(arc)
    arcpad = np.zeros((3, Q))
    k = min(Q, g0.shape[1])
    arcpad[:, :k] = g0[:, :k]
    mvec = np.arange(1, P + 1, dtype=float)[None, :, None]
    if not certified:
        s, r, b = params.floats()
        a_, b_, c_ = (_pad(x[i], P, Q) for i in range(3))
        ac = kernels.conv2_trunc(np.ascontiguousarray(x[0]), np.ascontiguousarray(x[2]), P, Q)
        ab = kernels.conv2_trunc(np.ascontiguousarray(x[0]), np.ascontiguousarray(x[1]), P, Q)
        g = np.stack([s * (b_ - a_), r * a_ - ac - b_, ab - b * c_])
        F = np.zeros((3, P + 1, Q))
        F[:, 0] = _pad(x[:, 0][:, None, :], 1, Q)[:, 0] - arcpad
        F[:, 1:] = mvec * _pad(x[:, 1:], P, Q) - L * g
        return F
    sig, rho, beta = params.ball("sigma"), params.ball("rho"), params.ball("beta")
    A, B, C = (Ball(_pad(x[i], P, Q)) for i in range(3))
    ac = _dot2_conv(x[0], x[2], P, Q)
    ab = _dot2_conv(x[0], x[1], P, Q)
    g1 = sig * (B - A)
    g2 = (rho * A - ac) - B
    g3 = ab - beta * C
    g = Ball(np.stack([g1.mid, g2.mid, g3.mid]), np.stack([g1.rad, g2.rad, g3.rad]))
    xs = Ball(_pad(x[:, 1:], P, Q))
    body = Ball(mvec) * xs - Ball(np.array(float(L))) * g
    F0 = Ball(_pad(x[:, :1], 1, Q)[:, 0]) - Ball(arcpad)
    mid = np.concatenate([F0.mid[:, None], body.mid], axis=1)
    rad = np.concatenate([F0.rad[:, None], body.rad], axis=1)
    return Ball(mid, rad).check()


def residual_F(candidate, arc, L: float, params: LorenzParams | None = None,
               certified: bool = False) -> MultiSeries:
    """F(x) as a MultiSeries (midpoints in certified mode)."""
    params = params or LorenzParams.classical()
    x = candidate.coeffs if isinstance(candidate, MultiSeries) else candidate
    out = residual_grid(x, arc, L, params, certified)
    return MultiSeries(out.mid if certified else out, BOX)


# ---------------------------------------------------------------------------
# dense operators (small orders; used for inspection and tests)


def _finite_DF_apply(coeffs: np.ndarray, L: float, params: LorenzParams, h: np.ndarray) -> np.ndarray:
    """DF^{MN}(a) h for a (3, M+1, N+1) direction, truncated to the grid."""
    s, r, b = params.floats()
    a, bb, c = coeffs
    _, M1, N1 = coeffs.shape
    conv = lambda u, v: kernels.conv2_trunc(np.ascontiguousarray(u), np.ascontiguousarray(v), M1, N1)
    h1, h2, h3 = h
    d1 = s * (h2 - h1)
    d2 = r * h1 - conv(c, h1) - h2 - conv(a, h3)
    d3 = conv(bb, h1) + conv(a, h2) - b * h3
    Df = np.stack([d1, d2, d3])
    out = np.empty_like(h)
    out[:, 0] = h[:, 0]
    m = np.arange(1, M1, dtype=float)[None, :, None]
    out[:, 1:] = m * h[:, 1:] - L * Df[:, :-1]
    return out


def build_A_dagger(abar, L: float, params: LorenzParams | None = None) -> BlockOperator:
    """Finite block DF^{MN}(abar) with the derivative rule on the tail."""
    params = params or LorenzParams.classical()
    x = abar.coeffs if isinstance(abar, MultiSeries) else np.asarray(abar, dtype=float)
    _, M1, N1 = x.shape
    size = M1 * N1
    cols = np.zeros((3 * size, 3 * size))
    for k in range(3 * size):
        e = np.zeros(3 * size)
        e[k] = 1.0
        cols[:, k] = _finite_DF_apply(x, L, params, e.reshape(3, M1, N1)).ravel()
    blocks = [[cols[i * size:(i + 1) * size, j * size:(j + 1) * size] for j in range(3)] for i in range(3)]
    return BlockOperator(blocks, tail="deriv", cut=M1)


def build_A(abar, L: float, params: LorenzParams | None = None, cond_max: float = 1e12) -> BlockOperator:
    """Float inverse of the finite block; 1/m on the tail."""
    Ad = build_A_dagger(abar, L, params)
    D = Ad.dense()
    cond = np.linalg.cond(D, p=1)
    if not np.isfinite(cond) or cond > cond_max:
        raise ConditioningError(f"DF^MN is numerically singular (cond {cond:.3g}); try a smaller L")
    inv = np.linalg.inv(D)
    size = D.shape[0] // 3
    blocks = [[inv[i * size:(i + 1) * size, j * size:(j + 1) * size] for j in range(3)] for i in range(3)]
    return BlockOperator(blocks, tail="inv_deriv", cut=Ad.cut)


# ---------------------------------------------------------------------------
# generators of the approximate inverse


@dataclass
class Generators:
    """Columns of the finite approximate inverse and their residual norms.

    ``W`` has shape (M+1 time, 3 component, N+1 space, 3(M+1) columns);
    column ``3 j + k`` answers a unit impulse in time slice ``j`` of
    component ``k``. ``WN[i, j, k]`` and ``RN[i, j, k]`` are l1 norms of
    component ``i`` of that column and of its residual.
    """

    W: np.ndarray
    WN: np.ndarray
    RN: np.ndarray

    @property
    def norm_A(self) -> float:
        return float(inflate(self.WN.max(axis=1).sum(axis=1), 3).max())

    @property
    def norm_R(self) -> float:
        return float(inflate(self.RN.max(axis=1).sum(axis=1), 3).max())


def _jacobian_norms(x: np.ndarray, params: LorenzParams) -> tuple[np.ndarray, np.ndarray]:
    """Space-time l1 norms of the Jacobian entries and their parameter slack.

    Returns ``(J, dJ)`` of shape (3, 3): ``J`` bounds the entry norms,
    ``dJ`` bounds the deviation of the float parameters from the exact ones.
    """
    s, r, b = params.floats()
    na = inflate(np.abs(x[0]).sum(), x[0].size)
    nb = inflate(np.abs(x[1]).sum(), x[1].size)
    nc = inflate(np.abs(x[2]).sum(), x[2].size)
    sh = params.interval("sigma").mag()
    rh = params.interval("rho").mag()
    bh = params.interval("beta").mag()
    J = np.array([[sh, sh, 0.0], [inflate(rh + nc, 1), 1.0, na], [nb, na, bh]])
    ds = _param_dev(params, "sigma", s)
    dr = _param_dev(params, "rho", r)
    db = _param_dev(params, "beta", b)
    dJ = np.array([[ds, ds, 0.0], [dr, 0.0, 0.0], [0.0, 0.0, db]])
    return J, dJ


def generators(x: np.ndarray, L: float, params: LorenzParams) -> Generators:
    """Batched variational recursion for all impulse columns.

    The recursion keeps spatial order ``N``; the spatial orders ``N+1..2N``
    that it drops form the residual together with a rounding envelope.
    """
    s, r, b = params.floats()
    _, M1, N1 = x.shape
    M, N = M1 - 1, N1 - 1
    Q = 2 * N + 1
    ncol = 3 * M1
    TA = _toeplitz(x[0], Q)  # (M+1, Q, N+1)
    TB = _toeplitz(x[1], Q)
    TC = _toeplitz(x[2], Q)
    W = np.zeros((M1, 3, N1, ncol))
    for k in range(3):
        W[0, k, 0, k] = 1.0
    Rhi = np.zeros((3, ncol))
    # flattened (space, time) Toeplitz rows for one matmul per product
    TAf = TA.transpose(1, 0, 2)
    TBf = TB.transpose(1, 0, 2)
    TCf = TC.transpose(1, 0, 2)
    for m in range(M):
        nc = 3 * (m + 1)  # columns with j <= m can be nonzero
        X = W[m::-1, :, :, :nc]  # (m+1, 3, N+1, nc), time reversed
        flat = lambda T: T[:, : m + 1].reshape(Q, (m + 1) * N1)
        x1 = X[:, 0].reshape((m + 1) * N1, nc)
        x23 = np.concatenate([X[:, 1].reshape((m + 1) * N1, nc), X[:, 2].reshape((m + 1) * N1, nc)], axis=1)
        aw = flat(TAf) @ x23
        a_w2, a_w3 = aw[:, :nc], aw[:, nc:]
        c_w1 = flat(TCf) @ x1
        b_w1 = flat(TBf) @ x1
        w1 = np.zeros((Q, nc))
        w2 = np.zeros((Q, nc))
        w3 = np.zeros((Q, nc))
        w1[:N1], w2[:N1], w3[:N1] = W[m, 0, :, :nc], W[m, 1, :, :nc], W[m, 2, :, :nc]
        Df = np.stack([s * (w2 - w1), r * w1 - c_w1 - w2 - a_w3, b_w1 + a_w2 - b * w3])
        f = L / (m + 1)
        W[m + 1, :, :, :nc] = f * Df[:, :N1]
        for k in range(3):
            W[m + 1, k, 0, 3 * (m + 1) + k] = 1.0 / (m + 1)
        Rhi[:, :nc] += np.abs(Df[:, N1:]).sum(axis=1)
    WN = inflate(np.abs(W).sum(axis=(0, 2)), M1 * N1)  # (3 i, ncol)
    J, dJ = _jacobian_norms(x, params)
    n_in = 4 * M1 * N1 + 8
    env = (gamma(n_in) + gamma(4)) * (J @ WN) + dJ @ WN  # (3 i, ncol)
    RN = inflate(abs(L) * (inflate(Rhi, Q * M1) + env), 6)
    for j in range(1, M1):
        for k in range(3):
            RN[k, 3 * j + k] += U
    WN = WN.reshape(3, M1, 3)
    RN = RN.reshape(3, M1, 3)
    return Generators(W, WN, RN)


# ---------------------------------------------------------------------------
# bounds and certification


@dataclass
class StepBounds:
    """Everything the radii polynomial and the error transport need."""

    bounds: ValidationBounds  # with the incoming error folded into Y0
    Y_defect: float
    kappa: float
    norm_A: float
    norm_R: float
    nu: np.ndarray  # per input component, before division by 1 - zeta
    r_full: float | None = None
    r_defect: float | None = None
    zeta: float | None = None


def _norm_seq(v: np.ndarray) -> np.ndarray:
    return inflate(np.abs(v).sum(axis=-1), v.shape[-1])


def z2_bound(norm_A: float, L: float, M: int) -> float:
    """2|L| (||A_ff|| + 1/M): finite block and tail act on the same product."""
    return float(inflate(2.0 * abs(L) * (norm_A + 1.0 / M), 3))


def step_bounds(x: np.ndarray, arc, L: float, params: LorenzParams, gens: Generators,
                e_in: np.ndarray, y_in: np.ndarray | None = None) -> StepBounds:
    """Y0, Z0, Z1, Z2 for one step.

    ``e_in[k]`` bounds component k of the incoming error; ``y_in[i]``, when
    given, is a sharper bound on component i of its image under the
    impulse response of time slice 0.
    """
    _, M1, N1 = x.shape
    M = M1 - 1
    aL = abs(L)
    F = residual_grid(x, arc, L, params, certified=True)
    if np.any(F.mid[:, 0] != 0.0):
        raise UsageError("time slice 0 of the candidate must equal the arc")
    FN = inflate(np.abs(F.mid).sum(axis=-1) + F.rad.sum(axis=-1), F.shape[-1] + 1)  # (3, 2M+2)
    WN = gens.WN  # (i, j, k)
    fin = np.einsum("kj,ijk->i", FN[:, 1:M1], WN[:, 1:, :])
    mt = np.arange(M1, 2 * M1, dtype=float)
    tail = (FN[:, M1:] / mt[None, :]).sum(axis=1)
    Yd = float(inflate(fin + tail, 3 * M1 + M1 + 4).max())
    Yin = inflate(WN[:, 0, :] @ e_in, 4)
    if y_in is not None:
        Yin = np.minimum(Yin, y_in)
    Yin = float(np.maximum(Yin, e_in.max()).max())
    Y0 = float(inflate(Yd + Yin, 1))

    s_, r_, b_ = (params.interval(n).mag() for n in ("sigma", "rho", "beta"))
    na, nb, nc = (float(inflate(np.abs(x[i]).sum(), x[i].size)) for i in range(3))
    kappa = float(inflate(max(2 * s_, r_ + nc + 1 + na, nb + na + b_), 3))
    Z1 = float(inflate(aL / M * kappa, 2))
    nA, nR = gens.norm_A, gens.norm_R
    if not nR < 1.0:
        raise ValidationError(f"approximate inverse residual {nR:.3g} >= 1", ValidationBounds(Y0, math.inf, Z1, math.inf))
    Z0 = float(inflate(nA * nR * (M + aL * kappa) / (1.0 - nR), 6))
    Z2 = z2_bound(nA, aL, M)

    # tail part of the linearized error transport: sum_{m > M} |L|/m (|J| |W_0k|)_{m-1}
    W0 = gens.W[:, :, :, :3]  # (time, l, space, k)
    nW0 = _norm_seq(W0.transpose(3, 1, 0, 2))  # (k, l, time)
    nJ = np.zeros((3, 3, M1))
    nJ[0, 0, 0] = nJ[0, 1, 0] = s_
    nJ[1, 0] = _norm_seq(x[2])
    nJ[1, 0, 0] = inflate(nJ[1, 0, 0] + r_, 1)
    nJ[1, 1, 0] = 1.0
    nJ[1, 2] = _norm_seq(x[0])
    nJ[2, 0] = _norm_seq(x[1])
    nJ[2, 1] = _norm_seq(x[0])
    nJ[2, 2, 0] = b_
    weights = aL / np.arange(M1, 2 * M1, dtype=float)  # m = M+1 .. 2M+1
    nu_tail = np.zeros((3, 3))  # (k, i)
    for k in range(3):
        for i in range(3):
            acc = 0.0
            for l in range(3):
                cv = np.convolve(nJ[i, l], nW0[k, l])  # time 0 .. 2M
                acc += float((cv[M:2 * M + 1] * weights).sum())
            nu_tail[k, i] = inflate(acc, 6 * M1)
    R0 = gens.RN[:, 0, :].max(axis=0)  # (k,)
    W0n = WN[:, 0, :].max(axis=0)  # (k,)
    nu = inflate(nA * R0 + nu_tail.max(axis=1), 3)
    sb = StepBounds(ValidationBounds(Y0, Z0, Z1, Z2, extra={"L": L, "M": M, "N": N1 - 1}),
                    Yd, kappa, nA, nR, nu)
    sb._W0n = W0n
    return sb


def certify_step(sb: StepBounds) -> StepBounds:
    """Certify the full and defect-only radii polynomials."""
    b = sb.bounds
    certify(b)
    sb.r_full = b.r_minus
    try:
        sb.r_defect = certify(ValidationBounds(sb.Y_defect, b.Z0, b.Z1, b.Z2)).r_minus
    except ValidationError:  # pragma: no cover - the full problem is harder
        sb.r_defect = sb.r_full
    sb.zeta = float(inflate(b.Z0 + b.Z1 + b.Z2 * sb.r_full, 3))
    if not sb.zeta < 1.0:
        raise ValidationError("contraction constant is not below one", b)
    b.extra.update(r_defect=sb.r_defect, kappa=sb.kappa, norm_A=sb.norm_A, norm_R=sb.norm_R)
    return sb


# ---------------------------------------------------------------------------
# the single step


@dataclass
class StepInput:
    """Input of one validated step.

    ``r0`` is an unlocated l1 error on the arc; pass ``ledger`` instead to
    transport a structured error. ``M`` defaults to ``round(eps * N)``.
    """

    arc: object
    r0: float = 0.0
    N: int = 24
    M: int | None = None
    eps: float = DEFAULT_EPS
    mu: float = MACHINE_MU
    params: LorenzParams = field(default_factory=LorenzParams.classical)
    ledger: ErrorLedger | None = None
    t0: float = 0.0
    direction: int = 1
    max_step: float = math.inf
    probe_order: int = 15
    L: float | None = None

    def __post_init__(self):
        if self.r0 < 0:
            raise UsageError("r0 must be non-negative")
        if self.M is None:
            self.M = max(1, int(round(self.eps * self.N)))
        if self.M < 1 or self.N < 1:
            raise UsageError("M and N must be at least 1")
        if self.direction not in (1, -1):
            raise UsageError("direction is +1 or -1")


@dataclass
class Chart:
    """A certified space-time patch ``Gamma(s, t)``, ``t`` in [0, 1].

    The patch covers physical times ``[t0, t0 + L]`` (``L < 0`` runs
    backward). ``r`` bounds the l1 distance to the true flow of the exact
    initial arc, so it is a C0 bound on ``[-1, 1] x [0, 1]``.
    """

    coeffs: np.ndarray
    L: float
    t0: float
    r: float
    r_defect: float
    bounds: ValidationBounds
    arc_id: int = 0
    parent_id: int | None = None
    s_range: tuple = (-1.0, 1.0)
    root: int = 0
    generation: int = 0
    next_arc: np.ndarray | None = field(default=None, repr=False)
    next_ledger: ErrorLedger | None = field(default=None, repr=False)
    fresh: float = 0.0

    @property
    def M(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def N(self) -> int:
        return self.coeffs.shape[2] - 1

    @property
    def t1(self) -> float:
        return self.t0 + self.L

    def series(self) -> MultiSeries:
        return MultiSeries(self.coeffs, BOX)

    def evaluate(self, s, t) -> np.ndarray:
        """Point(s) of the patch; ``t`` is the rescaled time in [0, 1]."""
        P = np.polynomial.polynomial
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        return np.stack([P.polyval2d(t, s, self.coeffs[i]) for i in range(3)], axis=-1)

    def collapse(self) -> np.ndarray:
        return collapse_grid(self.coeffs)[0]


def collapse_grid(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Coefficients of Gamma(s, 1) and an l1 bound on their rounding error."""
    _, M1, N1 = x.shape
    out = np.empty((3, N1))
    for i in range(3):
        for a in range(N1):
            out[i, a] = math.fsum(x[i, :, a])
    err = float(inflate(U * np.abs(out).sum(axis=1) + N1 * _TINY, N1).max())
    return out, err


def _propagator(W: np.ndarray) -> tuple[np.ndarray, float]:
    """Sum over time of the j = 0 columns: a 3x3 matrix of spatial series."""
    W0 = W[:, :, :, :3]  # (time, i, space, k)
    Mt = W0.sum(axis=0).transpose(0, 2, 1)  # (i, k, space)
    M1 = W.shape[0]
    err = gamma(M1 + 2) * np.abs(W0).sum(axis=0).transpose(0, 2, 1)
    e = inflate(inflate(err, M1 + 2).sum(axis=-1), W.shape[2])
    return np.ascontiguousarray(Mt), float(inflate(e.sum(axis=-1), 3).max())


def step_length(g: np.ndarray, inp: StepInput) -> float:
    """Unsigned step length: probe rescaling, refined at order M, capped for the variational series."""
    M, N, params, mu = inp.M, inp.N, inp.params, inp.mu
    g = _arc_grid(g, N)
    Mp = max(1, min(M, inp.probe_order))
    probe = taylor_grid(g, Mp, N, 1.0, params)
    L = choose_rescaling(probe, Mp, mu)
    full = taylor_grid(g, M, N, L, params)
    w = float(np.abs(full[:, M]).sum(axis=-1).max())
    if w > 0:
        L *= (mu / w) ** (1.0 / M)
    # keep the variational series convergent at this order as well
    J, _ = _jacobian_norms(g[:, None, :], params)
    kappa0 = float((J.sum(axis=1)).max())
    cap = (M / math.e) * mu ** (1.0 / M) / kappa0
    return min(L, cap)


def single_step(inp: StepInput) -> Chart:
    """Validated Taylor step: probe, rescale, expand, bound, certify."""
    N, M, params = inp.N, inp.M, inp.params
    g = _arc_grid(inp.arc)
    ledger = inp.ledger.copy() if inp.ledger is not None else ErrorLedger.scalar(N, inp.r0)
    if g.shape[1] > N + 1:
        ledger.add(float(inflate(np.abs(g[:, N + 1:]).sum(axis=1), g.shape[1]).max()))
    g = _arc_grid(g, N)
    if inp.L is None:
        L = step_length(g, inp)
        L = min(L, inp.max_step)
        L = inp.direction * L
    else:
        L = float(inp.L)
    if L == 0.0:
        raise UsageError("step length is zero")
    x = taylor_grid(g, M, N, L, params)
    if not np.all(np.isfinite(x)):
        raise ValidationError("Taylor coefficients overflowed", ValidationBounds(math.inf, 0, 0, 0))
    gens = generators(x, L, params)
    e_in = ledger.component_bounds()
    sb = step_bounds(x, g, L, params, gens, e_in, ledger.response_bounds(gens.W))
    certify_step(sb)

    # transport of the incoming error to t = 1 and the fresh defect
    Mt, Mt_err = _propagator(gens.W)
    new_ledger, extra = ledger.propagate(Mt, Mt_err)
    Z2 = sb.bounds.Z2
    nu = inflate(sb.nu + Z2 * sb.r_full * sb._W0n, 2)
    lin = float(inflate((nu * e_in).sum(), 4))
    fresh = inflate((sb.Y_defect + lin) / (1.0 - sb.zeta), 4)
    nxt, col_err = collapse_grid(x)
    fresh = float(inflate(fresh + extra + col_err, 3))
    new_ledger.add(fresh)
    chart = Chart(x, L, inp.t0, sb.r_full, sb.r_defect, sb.bounds, next_arc=nxt,
                  next_ledger=new_ledger, fresh=fresh)
    b = sb.bounds
    log.debug("step L=%.6g r=%.3e defect=%.3e Y0=%.3e Z0=%.3e Z1=%.3e Z2=%.3e",
              L, chart.r, chart.r_defect, b.Y0, b.Z0, b.Z1, b.Z2,
              extra={"L": L, "r": chart.r, "Y0": b.Y0, "Z0": b.Z0, "Z1": b.Z1, "Z2": b.Z2})
    return chart


def bounds(abar, arc, L: float, params: LorenzParams | None = None, r0: float = 0.0) -> ValidationBounds:
    """The four constants for a given candidate and step length."""
    params = params or LorenzParams.classical()
    x = abar.coeffs if isinstance(abar, MultiSeries) else np.asarray(abar, dtype=float)
    gens = generators(x, L, params)
    return step_bounds(x, _arc_grid(arc, x.shape[2] - 1), L, params, gens, np.full(3, float(r0))).bounds
