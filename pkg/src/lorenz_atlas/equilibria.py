"""Equilibria, certified eigendata and validated local manifold charts.

The local chart solves the invariance equation

    lambda_1 s_1 dP/ds_1 + lambda_2 s_2 dP/ds_2 = f(P(s_1, s_2))

order by order. Coefficients are carried as balls enclosing the exact
solution of the truncated recursion, and the tail beyond order ``N`` is
controlled by a contraction argument whose constants come from
:func:`validate_local_chart`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (CertificationError, ConditioningError, DomainError, ResonanceError,
                     UsageError)
from .interval import (Ball, Interval, IntervalArray, IntervalMatrix, U, _float_down, _float_up, ball_matmul,
                       ball_matvec, gamma, inflate, up)
from .sequences import BOX, SIMPLEX, MultiSeries, ball_conv2, ball_matmul_dot2, dot2_rows, simplex_mask
from .validation import ValidationBounds, certify

# ---------------------------------------------------------------------------
# parameters and equilibria


def _as_exact(v):
    if isinstance(v, str):
        return Fraction(v)
    if isinstance(v, float):
        return v
    return Fraction(v)


@dataclass(frozen=True)
class LorenzParams:
    """Lorenz parameters; values may be floats, ints, Fractions or 'p/q' strings."""

    sigma: object = 10
    rho: object = 28
    beta: object = Fraction(8, 3)

    def __post_init__(self):
        for name in ("sigma", "rho", "beta"):
            object.__setattr__(self, name, _as_exact(getattr(self, name)))

    @classmethod
    def classical(cls) -> "LorenzParams":
        return cls(10, 28, Fraction(8, 3))

    def floats(self) -> tuple[float, float, float]:
        return float(self.sigma), float(self.rho), float(self.beta)

    def interval(self, name: str) -> Interval:
        return Interval.exact(getattr(self, name))

    def ball(self, name: str) -> Ball:
        return Ball.from_interval(self.interval(name))

    def text(self, name: str) -> str:
        v = getattr(self, name)
        return repr(v) if isinstance(v, float) else str(v)


def lorenz_field(x: np.ndarray, params: LorenzParams) -> np.ndarray:
    """Plain float evaluation of the vector field (last axis holds x, y, z)."""
    s, r, b = params.floats()
    x = np.asarray(x, dtype=float)
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([s * (Y - X), X * (r - Z) - Y, X * Y - b * Z], axis=-1)


EQUILIBRIUM_NAMES = ("origin", "p+", "p-")


def find_equilibria(params: LorenzParams) -> dict:
    """The three equilibria as float vectors, keyed ``origin``, ``p+``, ``p-``."""
    if not params.rho > 1:
        raise DomainError("p+ and p- need rho > 1")
    out = {}
    for name in EQUILIBRIUM_NAMES:
        out[name] = equilibrium_enclosure(params, name).mid()
    return out


def equilibrium_enclosure(params: LorenzParams, name: str) -> IntervalArray:
    """Interval enclosure of one equilibrium."""
    if name == "origin":
        return IntervalArray(np.zeros(3))
    if name not in ("p+", "p-"):
        raise UsageError(f"unknown equilibrium {name!r}")
    if not params.rho > 1:
        raise DomainError("p+ and p- need rho > 1")
    rho1 = params.interval("rho") - 1
    q = (params.interval("beta") * rho1).sqrt()
    if q.lo == q.hi and Fraction(q.lo) ** 2 != Fraction(params.beta) * (Fraction(params.rho) - 1):
        q = Interval(q.lo, up(q.hi))
    sign = 1.0 if name == "p+" else -1.0
    x = q if sign > 0 else -q
    return IntervalArray([x.lo, x.lo, rho1.lo], [x.hi, x.hi, rho1.hi])


def jacobian_enclosure(params: LorenzParams, p: IntervalArray) -> IntervalMatrix:
    s, r, b = (params.interval(n) for n in ("sigma", "rho", "beta"))
    x, y, z = p[0], p[1], p[2]
    zero = Interval(0.0)
    rows = [[-s, s, zero], [r - z, Interval(-1.0), -x], [y, x, -b]]
    return IntervalMatrix.from_intervals(rows)


# ---------------------------------------------------------------------------
# eigendata


@dataclass
class EigenPair:
    """Certified eigenpair; imaginary parts are zero intervals for real pairs."""

    value_re: Interval
    value_im: Interval
    vector_re: IntervalArray
    vector_im: IntervalArray

    @property
    def is_complex(self) -> bool:
        return not (self.value_im.lo == 0.0 and self.value_im.hi == 0.0)

    def value_ball(self) -> Ball:
        if not self.is_complex:
            return Ball.from_interval(self.value_re)
        re, im = Ball.from_interval(self.value_re), Ball.from_interval(self.value_im)
        return Ball(np.array(re.mid + 1j * im.mid), inflate(np.hypot(re.rad, im.rad), 2))

    def vector_ball(self) -> Ball:
        re = Ball.from_interval(self.vector_re)
        if not self.is_complex:
            return re
        im = Ball.from_interval(self.vector_im)
        return Ball(re.mid + 1j * im.mid, inflate(np.hypot(re.rad, im.rad), 2))

    @property
    def value(self) -> complex:
        return complex(self.value_re.mid, self.value_im.mid)


@dataclass
class EquilibriumData:
    """Equilibrium, its Jacobian enclosure and certified eigendata.

    ``pair`` indexes the two eigenpairs parameterizing the manifold (slow
    first); ``scalings`` are the Euclidean lengths of the chart's
    first-order coefficients.
    """

    params: LorenzParams
    name: str
    point: IntervalArray
    jacobian: IntervalMatrix
    eigenpairs: list
    pair: tuple
    stability: str
    scalings: tuple = (15.0, 1.5)

    @property
    def is_complex(self) -> bool:
        return self.eigenpairs[self.pair[0]].is_complex

    @property
    def other(self) -> int:
        return ({0, 1, 2} - set(self.pair)).pop()

    def selected_values(self) -> tuple[Ball, Ball, Ball]:
        i, j = self.pair
        return (self.eigenpairs[i].value_ball(), self.eigenpairs[j].value_ball(),
                self.eigenpairs[self.other].value_ball())


def _assemble(blocks) -> IntervalMatrix:
    lo = np.block([[np.atleast_2d(b.lo) if b.lo.ndim else np.array([[b.lo]]) for b in row] for row in blocks])
    hi = np.block([[np.atleast_2d(b.hi) if b.hi.ndim else np.array([[b.hi]]) for b in row] for row in blocks])
    return IntervalMatrix(lo, hi)


def _col(v: IntervalArray) -> IntervalArray:
    return IntervalArray(v.lo.reshape(-1, 1), v.hi.reshape(-1, 1))


def _krawczyk(residual, jac, x0: np.ndarray, max_tries: int = 12) -> IntervalArray:
    """Krawczyk test on a box around ``x0``; returns the verified box.

    ``residual(X)`` returns an enclosure of F over the interval vector X and
    ``jac(X)`` an enclosure of DF over X.
    """
    n = x0.size
    Jm = jac(IntervalArray(x0)).mid()
    try:
        C = np.linalg.inv(Jm)
    except np.linalg.LinAlgError as exc:
        raise CertificationError("singular bordered Jacobian") from exc
    if not np.all(np.isfinite(C)):
        raise CertificationError("singular bordered Jacobian")
    # one Newton polish in floats
    x0 = x0 - C @ residual(IntervalArray(x0)).mid()
    Fx = residual(IntervalArray(x0))
    Ci = IntervalMatrix(C)
    base = IntervalArray(x0) - _flat(Ci @ _col(Fx))
    eps = 1e-15 * max(1.0, float(np.max(np.abs(x0)))) + 1e-300
    for _ in range(max_tries):
        X = IntervalArray(x0 - eps, x0 + eps)
        X = IntervalArray(np.nextafter(X.lo, -np.inf), np.nextafter(X.hi, np.inf))
        DX = jac(X)
        E = IntervalMatrix.identity(n) - Ci @ DX
        K = base + _flat(E @ _col(X - x0))
        if K.interior_subset(X):
            X = K.intersect(X)
            # Krawczyk iterates stay enclosures of the unique zero; tighten a little
            for _ in range(3):
                X = (base + _flat((IntervalMatrix.identity(n) - Ci @ jac(X)) @ _col(X - x0))).intersect(X)
            return X
        eps *= 16.0
    raise CertificationError("Krawczyk contraction could not be verified")


def _flat(v: IntervalArray) -> IntervalArray:
    return IntervalArray(v.lo.reshape(-1), v.hi.reshape(-1))


def _real_pair(J: IntervalMatrix, lam: float, vec: np.ndarray) -> EigenPair:
    vec = np.real(vec) / np.real(vec)[np.argmax(np.abs(vec))]
    k = int(np.argmax(np.abs(vec)))
    I3 = IntervalArray(np.eye(3))
    ek = IntervalArray(np.eye(3)[k].reshape(1, 3))

    def split(X):
        return X[0:3], X[3]

    def residual(X):
        return _point_residual(J, X.mid(), k, False)

    def jac(X):
        xi, l = split(X)
        A = J - I3 * IntervalArray(l.lo, l.hi)
        return _assemble([[A, -_col(xi)], [ek, IntervalArray(np.zeros((1, 1)))]])

    x0 = np.append(vec, lam)
    X = _krawczyk(residual, jac, x0)
    v = X[0:3]
    v.lo[k] = v.hi[k] = 1.0  # fixed by the normalization row
    return EigenPair(X[3], Interval(0.0), v, IntervalArray(np.zeros(3)))


def _point_residual(J: IntervalMatrix, x: np.ndarray, k: int, cplx: bool) -> IntervalArray:
    """Bordered eigen-residual at a point, in exact rational arithmetic.

    The residual is affine in the Jacobian entries, so its range over the
    interval Jacobian is the sum of the endpoint ranges of each term.
    """
    Fr = Fraction
    Jlo = [[Fr(float(v)) for v in row] for row in J.lo]
    Jhi = [[Fr(float(v)) for v in row] for row in J.hi]
    xs = [Fr(float(v)) for v in x]

    def jx(vec, i):
        lo = hi = Fr(0)
        for c in range(3):
            a, b = Jlo[i][c] * vec[c], Jhi[i][c] * vec[c]
            lo += min(a, b)
            hi += max(a, b)
        return lo, hi

    rows = []
    if not cplx:
        xi, lam = xs[0:3], xs[3]
        for i in range(3):
            lo, hi = jx(xi, i)
            rows.append((lo - lam * xi[i], hi - lam * xi[i]))
        rows.append((xi[k] - 1, xi[k] - 1))
    else:
        xr, xim, lr, li = xs[0:3], xs[3:6], xs[6], xs[7]
        for i in range(3):
            lo, hi = jx(xr, i)
            t = -lr * xr[i] + li * xim[i]
            rows.append((lo + t, hi + t))
        for i in range(3):
            lo, hi = jx(xim, i)
            t = -lr * xim[i] - li * xr[i]
            rows.append((lo + t, hi + t))
        rows.append((xr[k] - 1, xr[k] - 1))
        rows.append((xim[k], xim[k]))
    lo = [_float_down(a) for a, _ in rows]
    hi = [_float_up(b) for _, b in rows]
    return IntervalArray(lo, hi)


def _complex_pair(J: IntervalMatrix, lam: complex, vec: np.ndarray) -> EigenPair:
    vec = vec / vec[np.argmax(np.abs(vec))]
    k = int(np.argmax(np.abs(vec)))
    I3 = IntervalArray(np.eye(3))
    Z3 = IntervalArray(np.zeros((3, 3)))
    ek = IntervalArray(np.eye(3)[k].reshape(1, 3))
    z13 = IntervalArray(np.zeros((1, 3)))
    z11 = IntervalArray(np.zeros((1, 1)))

    def parts(X):
        return X[0:3], X[3:6], X[6], X[7]

    def residual(X):
        return _point_residual(J, X.mid(), k, True)

    def jac(X):
        xr, xi, lr, li = parts(X)
        lr, li = IntervalArray(lr.lo, lr.hi), IntervalArray(li.lo, li.hi)
        A = J - I3 * lr
        return _assemble([
            [A, I3 * li, -_col(xr), _col(xi)],
            [-(I3 * li), A, -_col(xi), -_col(xr)],
            [ek, z13, z11, z11],
            [z13, ek, z11, z11],
        ])

    x0 = np.concatenate([vec.real, vec.imag, [lam.real, lam.imag]])
    X = _krawczyk(residual, jac, x0)
    del Z3
    vr, vi = X[0:3], X[3:6]
    vr.lo[k] = vr.hi[k] = 1.0
    vi.lo[k] = vi.hi[k] = 0.0
    return EigenPair(X[6], X[7], vr, vi)


def certify_eigendata(params: LorenzParams, name: str = "origin", stability: str = "stable",
                      scalings=None, approx=None) -> EquilibriumData:
    """Certify all eigenpairs of the Jacobian at an equilibrium.

    ``approx`` optionally provides ``(values, vectors)`` from another solver;
    by default numpy's eigensolver is used on the midpoint Jacobian. The two
    eigenvalues of the requested stability type are selected, the one of
    smaller modulus first (for a complex pair: positive imaginary part
    first).
    """
    if stability not in ("stable", "unstable"):
        raise UsageError("stability must be 'stable' or 'unstable'")
    p = equilibrium_enclosure(params, name)
    J = jacobian_enclosure(params, p)
    if approx is None:
        vals, vecs = np.linalg.eig(J.mid())
    else:
        vals, vecs = approx
        vals, vecs = np.asarray(vals), np.asarray(vecs)
    pairs = []
    for i in range(3):
        lam, v = vals[i], vecs[:, i]
        if abs(np.imag(lam)) > 1e-12 * max(1.0, abs(lam)):
            pairs.append(_complex_pair(J, complex(lam), v.astype(complex)))
        else:
            pairs.append(_real_pair(J, float(np.real(lam)), np.real(v)))
    # fix the order: by real part, conjugate pairs with positive imaginary part first
    order = sorted(range(3), key=lambda i: (pairs[i].value_re.mid, -pairs[i].value_im.mid))
    pairs = [pairs[i] for i in order]
    want = (lambda e: e.value_re.hi < 0.0) if stability == "stable" else (lambda e: e.value_re.lo > 0.0)
    sel = [i for i, e in enumerate(pairs) if want(e)]
    if len(sel) != 2:
        raise UsageError(f"equilibrium {name} has {len(sel)} {stability} eigenvalues, need 2")
    sel.sort(key=lambda i: (abs(pairs[i].value), -pairs[i].value_im.mid))
    if scalings is None:
        scalings = (15.0, 1.5) if not pairs[sel[0]].is_complex else (1.0, 1.0)
    return EquilibriumData(params, name, p, J, pairs, tuple(sel), stability, tuple(float(s) for s in scalings))


# ---------------------------------------------------------------------------
# resonances and the tail constant


@dataclass
class ResonanceReport:
    """Outcome of the resonance scan and the tail constants.

    ``K_closed`` comes from the closed-form eigenvalue gaps; ``K_resolvent``
    bounds the entrywise supremum of the resolvent of the Jacobian over all
    orders beyond ``N`` (it includes the eigenvector conditioning). ``K`` is
    the value used for validation.
    """

    N: int
    resonance_free: bool
    checked: int
    K_closed: float
    K_resolvent: float | None = None
    K: float = field(default=math.inf)
    n_enumerated: int = 0
    condition: float | None = None
    method: str = "closed"

    def admissible(self, value: float) -> bool:
        """True when ``value`` dominates the closed-form bound."""
        return self.K_closed <= value


def _gap_lower(n: int, lam_min_re: Interval, lam_j_re: Interval, same_sign: bool) -> Interval:
    # lower bound for |alpha.lambda - lambda_j| over |alpha| >= n
    a = lam_min_re.mig()
    b = lam_j_re.mag()
    val = Interval(n) * Interval(a) - Interval(b) if same_sign else Interval(n) * Interval(a) + Interval(b)
    return val


K_METHODS = ("lemma", "resolvent", "max")


def check_resonances(l1: Ball, l2: Ball, l3: Ball | None, N: int, jacobian: IntervalMatrix | None = None,
                     vectors=None, method: str = "lemma") -> ResonanceReport:
    """Scan 2 <= |alpha| <= N for resonances and bound the tail constant.

    ``method`` selects the tail constant: ``"lemma"`` multiplies the
    closed-form gap bound by the eigenvector condition number (needs
    ``vectors``), ``"resolvent"`` uses :func:`resolvent_bound` (needs
    ``jacobian``) and ``"max"`` takes the larger of the two. Without the
    required inputs only ``K_closed`` is filled in.

    Raises :class:`ResonanceError` if some ``alpha.lambda - lambda_j`` ball
    contains zero.
    """
    if method not in K_METHODS:
        raise UsageError(f"unknown tail constant method {method!r}")
    lams = [l1, l2] + ([l3] if l3 is not None else [])
    a1, a2 = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing="ij")
    mask = (a1 + a2 >= 2) & (a1 + a2 <= N)
    a1, a2 = a1[mask].astype(float), a2[mask].astype(float)
    mu = Ball(a1) * Ball(l1.mid, l1.rad) + Ball(a2) * Ball(l2.mid, l2.rad)
    checked = 0
    for j, lj in enumerate(lams):
        d = mu - Ball(np.broadcast_to(lj.mid, mu.shape), np.broadcast_to(lj.rad, mu.shape))
        bad = np.abs(d.mid) <= d.rad
        checked += int(bad.size)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise ResonanceError(f"resonance at alpha=({int(a1[k])},{int(a2[k])}) with eigenvalue {j + 1}")

    # closed-form gaps: |alpha.lambda| >= (N+1) |Re lambda_min|
    re = [Interval(float(np.real(l.mid)) - l.rad, float(np.real(l.mid)) + l.rad) for l in lams]
    re = [Interval(min(r.lo, up(r.lo)), up(r.hi)) for r in re]
    lam_min = re[0] if re[0].mig() <= re[1].mig() else re[1]
    sgn = 1 if lam_min.lo > 0 else -1
    K_closed = 0.0
    for r in re:
        same = (r.lo > 0) == (sgn > 0) and r.mig() > 0
        gap = _gap_lower(N + 1, lam_min, r, same)
        if gap.lo <= 0.0:
            K_closed = math.inf
            break
        K_closed = max(K_closed, (Interval(1.0) / gap).hi)

    report = ResonanceReport(N, True, checked, K_closed)
    candidates = []
    if vectors is not None and method in ("lemma", "max"):
        report.condition = eigvec_condition(vectors)
        candidates.append(up(K_closed * report.condition))
    if jacobian is not None and method in ("resolvent", "max"):
        kr, nen = resolvent_bound(jacobian, l1, l2, N)
        report.K_resolvent = kr
        report.n_enumerated = nen
        candidates.append(kr)
    report.K = max(candidates) if candidates else K_closed
    report.method = method if candidates else "closed"
    return report


def eigvec_condition(vectors: list) -> float:
    """Upper bound on ||Q|| ||Q^-1|| in the max-row-sum norm.

    Columns are rescaled to unit Euclidean length first (any scaling of an
    eigenvector is again an eigenvector).
    """
    cols = []
    for v in vectors:
        c = 1.0 / float(np.linalg.norm(v.mid))
        cols.append(v * Ball(np.full(3, c)))
    Q = Ball(np.stack([v.mid for v in cols], axis=1), np.stack([v.rad for v in cols], axis=1))
    Qm = Q.mid
    C = np.linalg.inv(Qm)
    E = Ball(np.eye(3)) - ball_matmul(Ball(C), Q)
    e = float(np.max(inflate(np.sum(E.mag(), axis=1), 4)))
    if e >= 1.0:
        raise ConditioningError("eigenvector matrix is numerically singular")
    qn = float(np.max(inflate(np.sum(Q.mag(), axis=1), 4)))
    cn = float(np.max(inflate(np.sum(np.abs(C), axis=1), 4)))
    return up(qn * up(cn / (1.0 - e)))


def _inverse_entry_bounds(A: Ball) -> np.ndarray:
    """Entrywise upper bounds of |A^-1| for a batch of 3x3 ball matrices."""
    C = np.linalg.inv(A.mid)
    E = Ball(np.broadcast_to(np.eye(3), A.shape)) - ball_matmul(Ball(C), A)
    e = np.max(inflate(np.sum(E.mag(), axis=-1), 4), axis=-1)
    if np.any(e >= 1.0):
        raise ConditioningError("resolvent matrix is numerically singular")
    absC = np.abs(C)
    cn = np.max(inflate(np.sum(absC, axis=-1), 4), axis=-1)
    delta = inflate(e * cn / (1.0 - e), 4)
    return inflate(absC, 1) + delta[..., None, None]


def resolvent_bound(J: IntervalMatrix, l1: Ball, l2: Ball, N: int, n_cap: int = 20000) -> tuple[float, int]:
    """Bound max_i sum_k sup_{|alpha|>N} |(J - alpha.lambda)^-1|_ik.

    Orders are enumerated until a Neumann series bound on the remaining
    orders drops below the enumerated maximum.
    """
    Jb = Ball(J.mid(), J.rad())
    normJ = float(np.max(inflate(np.sum(Jb.mag(), axis=1), 4)))
    remin = min(abs(np.real(l1.mid)) - l1.rad, abs(np.real(l2.mid)) - l2.rad)
    if remin <= 0:
        raise ConditioningError("eigenvalue real parts do not bound the resolvent set away from zero")
    sup = np.zeros((3, 3))
    n = N + 1
    count = 0
    chunk = 64
    while True:
        ns = np.arange(n, n + chunk)
        a1 = np.concatenate([np.arange(k + 1) for k in ns]).astype(float)
        a2 = np.concatenate([k - np.arange(k + 1) for k in ns]).astype(float)
        mu = Ball(a1) * Ball(np.asarray(l1.mid), l1.rad) + Ball(a2) * Ball(np.asarray(l2.mid), l2.rad)
        cplx = np.iscomplexobj(mu.mid)
        eye = np.eye(3)
        Amid = Jb.mid[None].astype(complex if cplx else float) - mu.mid[:, None, None] * eye
        Arad = inflate(Jb.rad[None] + mu.rad[:, None, None] * eye + 2 * U * np.abs(Amid), 2)
        sup = np.maximum(sup, np.max(_inverse_entry_bounds(Ball(Amid, Arad)), axis=0))
        count += a1.size
        n += chunk
        R = (n - 1 + 1) * remin  # every remaining |alpha| >= n
        R = R * (1 - 4 * U)
        kmax = float(np.max(inflate(np.sum(sup, axis=1), 3)))
        if R > normJ:
            tail = up(up(1.0 + 3 * up(normJ / (R - normJ) * (1 + 4 * U))) / R)
            if tail <= kmax or n > n_cap:
                tail_entries = np.full((3, 3), up(up(normJ / (R - normJ) * (1 + 4 * U)) / R))
                tail_entries[np.diag_indices(3)] = up(up(1.0 + up(normJ / (R - normJ) * (1 + 4 * U))) / R)
                total = np.maximum(sup, tail_entries)
                return float(np.max(inflate(np.sum(total, axis=1), 3))), count
        if n > n_cap:
            raise ConditioningError("resolvent enumeration did not terminate")


# ---------------------------------------------------------------------------
# homological equations


@dataclass
class LocalChart:
    """Validated local manifold chart.

    ``coeffs`` is a ball array of shape (3, N+1, N+1) indexed by the
    multi-index; entries with |alpha| > N are zero. ``r_hat`` is the tail
    bound from the contraction argument; ``coeff_radius`` is the l1 sum of
    coefficient radii. ``error`` is their sum, a C^0 bound on the unit
    polydisk.
    """

    coeffs: Ball
    lambdas: tuple
    scalings: tuple
    is_complex: bool
    point: np.ndarray
    r_hat: float | None = None
    coeff_radius: float = 0.0
    bounds: ValidationBounds | None = None
    resonance: ResonanceReport | None = None
    eq: EquilibriumData | None = None

    @property
    def N(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def error(self) -> float:
        if self.r_hat is None:
            raise CertificationError("chart has not been validated")
        return up(self.r_hat + self.coeff_radius)

    def series(self) -> MultiSeries:
        return MultiSeries(self.coeffs.mid, SIMPLEX)

    def evaluate(self, s1, s2) -> np.ndarray:
        """Real chart value at real parameters (conjugate variables for complex data)."""
        c = self.coeffs.mid
        P = np.polynomial.polynomial
        if self.is_complex:
            z1, z2 = s1 + 1j * s2, s1 - 1j * s2
            return np.real(np.array([P.polyval2d(z1, z2, ci) for ci in c]))
        return np.array([P.polyval2d(s1, s2, ci) for ci in c])

    def evaluate_complex(self, z1, z2) -> np.ndarray:
        P = np.polynomial.polynomial
        return np.array([P.polyval2d(z1, z2, ci) for ci in self.coeffs.mid])


def _layer_index(N: int):
    """Per total degree d, gather indices of the products entering q_alpha."""
    layers = {}
    for d in range(2, N + 1):
        rows, k1s, k2s, j1s, j2s = [], [], [], [], []
        for a1 in range(d + 1):
            a2 = d - a1
            for k1 in range(a1 + 1):
                for k2 in range(a2 + 1):
                    if (k1 == 0 and k2 == 0) or (k1 == a1 and k2 == a2):
                        continue
                    rows.append(a1)
                    k1s.append(k1)
                    k2s.append(k2)
                    j1s.append(a1 - k1)
                    j2s.append(a2 - k2)
        layers[d] = tuple(np.array(v, dtype=np.intp) for v in (rows, k1s, k2s, j1s, j2s))
    return layers


def _gathered_sum(prod: Ball, rows: np.ndarray, nbins: int) -> Ball:
    counts = np.bincount(rows, minlength=nbins)
    nmax = int(counts.max()) if counts.size else 0
    if np.iscomplexobj(prod.mid):
        mid = (np.bincount(rows, prod.mid.real, nbins) + 1j * np.bincount(rows, prod.mid.imag, nbins))
    else:
        mid = np.bincount(rows, prod.mid, nbins)
    absm = np.bincount(rows, np.abs(prod.mid), nbins)
    rad = np.bincount(rows, prod.rad, nbins) + 2.0 * gamma(nmax + 2) * absm
    return Ball(mid, inflate(rad, nmax + 2))


def solve_homological(eq: EquilibriumData, N: int, scalings=None, precision: str = "extended") -> LocalChart:
    """Ball enclosures of the exact order-N solution of the homological equations.

    ``precision="extended"`` runs the recursion in 128-bit ball arithmetic
    and rounds each coefficient once, so the float radii stay near half an
    ulp. ``"double"`` propagates double precision balls throughout.
    """
    if N < 1:
        raise UsageError("order must be at least 1")
    if precision == "extended":
        return _solve_homological_arb(eq, N, scalings)
    if precision != "double":
        raise UsageError(f"unknown precision {precision!r}")
    scalings = eq.scalings if scalings is None else tuple(float(s) for s in scalings)
    l1, l2, l3 = eq.selected_values()
    res = check_resonances(l1, l2, l3, N)
    del res
    cplx = eq.is_complex
    dtype = complex if cplx else float
    mid = np.zeros((3, N + 1, N + 1), dtype=dtype)
    rad = np.zeros((3, N + 1, N + 1))
    pb = Ball.from_interval(eq.point)
    mid[:, 0, 0] = pb.mid
    rad[:, 0, 0] = pb.rad
    for slot, (idx, sc) in enumerate(zip(eq.pair, scalings)):
        v = eq.eigenpairs[idx].vector_ball()
        c = sc / float(np.linalg.norm(v.mid))
        vb = v * Ball(np.full(3, c))
        pos = (1, 0) if slot == 0 else (0, 1)
        mid[:, pos[0], pos[1]] = vb.mid
        rad[:, pos[0], pos[1]] = vb.rad
    Jb = Ball(eq.jacobian.mid(), eq.jacobian.rad())
    x0 = pb[0]
    layers = _layer_index(N)
    eye = np.eye(3)
    for d in range(2, N + 1):
        rows, k1, k2, j1, j2 = layers[d]
        a1 = np.arange(d + 1)
        a2 = d - a1
        p1 = Ball(mid[0, j1, j2], rad[0, j1, j2])
        q2 = _gathered_sum(p1 * Ball(mid[2, k1, k2], rad[2, k1, k2]), rows, d + 1)
        q3 = _gathered_sum(p1 * Ball(mid[1, k1, k2], rad[1, k1, k2]), rows, d + 1)
        zero = Ball(np.zeros(d + 1, dtype=q2.mid.dtype))
        q = Ball(np.stack([zero.mid, q2.mid, -q3.mid], axis=-1), np.stack([zero.rad, q2.rad, q3.rad], axis=-1))
        mu = Ball(a1.astype(float)) * l1 + Ball(a2.astype(float)) * l2
        Amid = Jb.mid[None].astype(dtype) - mu.mid[:, None, None] * eye
        Arad = inflate(Jb.rad[None] + mu.rad[:, None, None] * eye + 2 * U * np.abs(Amid), 2)
        A = Ball(Amid, Arad)
        sol = _solve3(A, q)
        mid[:, a1, a2] = sol.mid.T
        rad[:, a1, a2] = sol.rad.T
    del x0
    coeffs = Ball(mid, rad)
    lambdas = (l1, l2)
    return LocalChart(coeffs, lambdas, scalings, cplx, pb.mid.real.copy(), eq=eq)


def _arb_jacobian(eq: EquilibriumData):
    """Jacobian at the exact equilibrium as a 128-bit complex ball matrix."""
    from flint import acb_mat, arb, fmpq

    def num(v):
        if isinstance(v, Fraction):
            return arb(fmpq(v.numerator, v.denominator))
        return arb(v)

    s, r, b = num(eq.params.sigma), num(eq.params.rho), num(eq.params.beta)
    if eq.name == "origin":
        x = y = z = arb(0)
    else:
        q = (b * (r - 1)).sqrt()
        x = y = q if eq.name == "p+" else -q
        z = r - 1
    rows = [[-s, s, arb(0)], [r - z, arb(-1), -x], [y, x, -b]]
    return acb_mat(rows), (x, y, z)


def _arb_eigenpair(J, target: complex):
    """Eigenvalue ball closest to ``target`` and its eigenvector scaled so
    its largest component is exactly one."""
    E, R = J.eig(right=True)
    j = min(range(3), key=lambda i: abs(complex(E[i].mid()) - target))
    v = [R[i, j] for i in range(3)]
    k = max(range(3), key=lambda i: abs(complex(v[i].mid())))
    return E[j], [vi / v[k] for vi in v]


def _arb_to_ball(vals, cplx: bool) -> tuple[np.ndarray, np.ndarray]:
    from flint import acb, arb
    mid = np.empty(len(vals), dtype=complex if cplx else float)
    rad = np.empty(len(vals))
    for i, v in enumerate(vals):
        if cplx:
            m = complex(float(v.real.mid()), float(v.imag.mid()))
            e = (v - acb(m.real, m.imag)).abs_upper()
        else:
            m = float(v.mid())
            e = (v - arb(m)).abs_upper()
        mid[i] = m
        rad[i] = up(float(e))
    return mid, rad


def _solve_homological_arb(eq: EquilibriumData, N: int, scalings=None) -> LocalChart:
    from flint import acb_mat, arb, arb_mat, ctx

    old = ctx.prec
    ctx.prec = 128
    try:
        scalings = eq.scalings if scalings is None else tuple(float(s) for s in scalings)
        l1, l2, l3 = eq.selected_values()
        check_resonances(l1, l2, l3, N)
        cplx = eq.is_complex
        J, point = _arb_jacobian(eq)
        lams, vecs = [], []
        for idx in eq.pair:
            lam, v = _arb_eigenpair(J, eq.eigenpairs[idx].value)
            if not cplx:
                lam, v = lam.real, [c.real for c in v]
            # sanity: the refined value must agree with the double enclosure
            mid = complex(lam.mid()) if cplx else float(lam.mid())
            if abs(mid - eq.eigenpairs[idx].value) > 1e-10 * max(1.0, abs(mid)):
                raise CertificationError("extended eigen refinement disagrees with the double enclosure")
            lams.append(lam)
            vecs.append(v)
        zero = lams[0] * 0
        P = [[[zero for _ in range(N + 1)] for _ in range(N + 1)] for _ in range(3)]
        for i in range(3):
            P[i][0][0] = point[i] + zero
        for slot, (v, sc) in enumerate(zip(vecs, scalings)):
            c = sc / float(np.linalg.norm([complex(x.mid()) for x in v]))
            pos = (1, 0) if slot == 0 else (0, 1)
            for i in range(3):
                P[i][pos[0]][pos[1]] = v[i] * c
        Jm = J if cplx else arb_mat([[J[i, j].real for j in range(3)] for i in range(3)])
        Mat = acb_mat if cplx else arb_mat
        A0, B0, C0 = P
        for d in range(2, N + 1):
            for a1 in range(d + 1):
                a2 = d - a1
                q2 = zero
                q3 = zero
                for k1 in range(a1 + 1):
                    Ar, Cr, Br = A0[a1 - k1], C0[k1], B0[k1]
                    for k2 in range(a2 + 1):
                        if (k1 == 0 and k2 == 0) or (k1 == a1 and k2 == a2):
                            continue
                        pa = Ar[a2 - k2]
                        q2 += pa * Cr[k2]
                        q3 += pa * Br[k2]
                mu = lams[0] * a1 + lams[1] * a2
                A = Mat([[Jm[i, j] - (mu if i == j else 0) for j in range(3)] for i in range(3)])
                sol = A.solve(Mat([[zero], [q2], [-q3]]))
                for i in range(3):
                    P[i][a1][a2] = sol[i, 0]
        dtype = complex if cplx else float
        mid = np.zeros((3, N + 1, N + 1), dtype=dtype)
        rad = np.zeros((3, N + 1, N + 1))
        for i in range(3):
            for a1 in range(N + 1):
                m, r = _arb_to_ball(P[i][a1][: N + 1 - a1], cplx)
                mid[i, a1, : N + 1 - a1] = m
                rad[i, a1, : N + 1 - a1] = r
    finally:
        ctx.prec = old
    pb = Ball.from_interval(eq.point)
    return LocalChart(Ball(mid, rad), (l1, l2), scalings, cplx, pb.mid.real.copy(), eq=eq)


def _solve3(A: Ball, q: Ball) -> Ball:
    """Batched interval-verified solve of A x = q (shape (k,3,3) and (k,3))."""
    try:
        C = np.linalg.inv(A.mid)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("singular homological matrix") from exc
    if not np.all(np.isfinite(C)):
        raise ConditioningError("singular homological matrix")
    x = np.einsum("kij,kj->ki", C, q.mid)
    r = _residual3(A, x, q)
    Cr = ball_matvec(Ball(C), r)
    E = Ball(np.broadcast_to(np.eye(3), A.shape)) - ball_matmul(Ball(C), A)
    e = np.max(inflate(np.sum(E.mag(), axis=-1), 4), axis=-1)
    if np.any(e >= 1.0):
        raise ConditioningError("homological matrix too ill-conditioned to verify")
    # x - x~ = (CA)^-1 C r = C r + E (CA)^-1 C r, bounded componentwise
    crm = Cr.mag()
    crn = np.max(crm, axis=-1)
    extra = inflate(e * crn / (1.0 - e), 4)
    radius = inflate(crm + extra[:, None], 2)
    return Ball(x, radius)


def _residual3(A: Ball, x: np.ndarray, q: Ball) -> Ball:
    """Ball enclosure of q - A x for point x, midpoint by compensated sums."""
    Am = A.mid
    if np.iscomplexobj(Am) or np.iscomplexobj(x) or np.iscomplexobj(q.mid):
        Am, xc, qm = Am.astype(complex), x.astype(complex), q.mid.astype(complex)
        xr = np.broadcast_to(xc[:, None, :], Am.shape)
        # real part: q_re - (A_re x_re - A_im x_im); imaginary part likewise
        ar = np.concatenate([-Am.real, Am.imag, np.ones(Am.shape[:-1] + (1,))], axis=-1)
        br = np.concatenate([xr.real, xr.imag, qm.real[..., None]], axis=-1)
        ai = np.concatenate([-Am.real, -Am.imag, np.ones(Am.shape[:-1] + (1,))], axis=-1)
        bi = np.concatenate([xr.imag, xr.real, qm.imag[..., None]], axis=-1)
        vr, er = dot2_rows(ar, br)
        vi, ei = dot2_rows(ai, bi)
        mid, rnd = vr + 1j * vi, er + ei
    else:
        xr = np.broadcast_to(x[:, None, :], Am.shape)
        a = np.concatenate([-Am, np.ones(Am.shape[:-1] + (1,))], axis=-1)
        b = np.concatenate([xr, q.mid[..., None]], axis=-1)
        mid, rnd = dot2_rows(a, b)
    rad = inflate(q.rad + np.einsum("kij,kj->ki", A.rad, np.abs(x)) + rnd, 5)
    return Ball(mid, rad)


def invariance_residual(chart: LocalChart, s1, s2) -> np.ndarray:
    """Float residual f(P) - lambda_1 s_1 P_1 - lambda_2 s_2 P_2 at (complex) parameters."""
    c = chart.coeffs.mid
    N = chart.N
    P = np.polynomial.polynomial
    i = np.arange(N + 1)
    d1 = c * i[None, :, None]
    d2 = c * i[None, None, :]
    val = np.array([P.polyval2d(s1, s2, ci) for ci in c])
    g1 = np.array([P.polyval2d(s1, s2, ci) for ci in d1])
    g2 = np.array([P.polyval2d(s1, s2, ci) for ci in d2])
    sgm, rho, beta = chart.eq.params.floats()
    X, Y, Z = val
    f = np.array([sgm * (Y - X), X * (rho - Z) - Y, X * Y - beta * Z])
    l1, l2 = complex(chart.lambdas[0].mid), complex(chart.lambdas[1].mid)
    if not chart.is_complex:
        l1, l2 = l1.real, l2.real
    return f - l1 * g1 - l2 * g2


# ---------------------------------------------------------------------------
# a-posteriori validation


def validate_local_chart(chart: LocalChart, K_N: float | None = None, method: str = "lemma") -> ValidationBounds:
    """Tail bound of the order-N chart; stores ``r_hat`` on the chart.

    ``K_N`` defaults to the tail constant of :func:`check_resonances` with
    the given ``method``.
    """
    N = chart.N
    eq = chart.eq
    report = None
    if K_N is None:
        if eq is None:
            raise UsageError("K_N is required for charts without equilibrium data")
        report = tail_constant(eq, N, method)
        K_N = report.K
    a, b, c = chart.coeffs[0], chart.coeffs[1], chart.coeffs[2]
    size = 2 * N + 1
    ab = ball_conv2(a, b, size, size)
    ac = ball_conv2(a, c, size, size)
    i, j = np.indices((size, size))
    tail = ((i + j) >= N + 1) & ((i + j) <= 2 * N)
    ysum = np.sum(ab.mag()[tail]) + np.sum(ac.mag()[tail])
    nterms = 2 * int(tail.sum())
    Y0 = up(K_N * float(inflate(ysum, nterms)))
    low = simplex_mask(N)
    low[0, 0] = False
    zsum = np.sum(2.0 * a.mag()[low] + b.mag()[low] + c.mag()[low])
    Z1 = up(K_N * float(inflate(zsum, 4 * int(low.sum()))))
    Z2 = up(4.0 * K_N)
    bounds = ValidationBounds(Y0, 0.0, Z1, Z2, extra={"K_N": K_N})
    certify(bounds)
    chart.r_hat = bounds.r_minus
    chart.coeff_radius = _radius_sum(chart.coeffs)
    chart.bounds = bounds
    if report is not None:
        chart.resonance = report
    return bounds


def tail_constant(eq: EquilibriumData, N: int, method: str = "lemma") -> ResonanceReport:
    l1, l2, l3 = eq.selected_values()
    vectors = [eq.eigenpairs[i].vector_ball() for i in range(3)]
    return check_resonances(l1, l2, l3, N, jacobian=eq.jacobian, vectors=vectors, method=method)


def _radius_sum(coeffs: Ball) -> float:
    r = coeffs.rad.reshape(3, -1)
    return float(np.max(inflate(r.sum(axis=1), r.shape[1])))


def local_chart(params: LorenzParams, name: str, stability: str, N: int, scalings=None,
                method: str = "lemma", precision: str = "extended") -> LocalChart:
    """Certify eigendata, solve the homological equations and validate."""
    eq = certify_eigendata(params, name, stability, scalings)
    chart = solve_homological(eq, N, scalings, precision)
    validate_local_chart(chart, method=method)
    return chart


# ---------------------------------------------------------------------------
# boundary arcs


@dataclass
class BoundaryArc:
    """One-variable arc (3, n+1) lifted from the local chart, with l1 error."""

    coeffs: np.ndarray
    error: float
    corners: tuple

    def series(self) -> MultiSeries:
        return MultiSeries(self.coeffs, BOX)


SQUARE_NODES = ((-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0))


def polygon_nodes(k: int, radius: float | None = None) -> list:
    """Vertices of a regular k-gon.

    The default radius makes |c0| + |c1| <= 1 for every chord written as
    c0 + c1 s, so powers of the chord stay in the unit ball of the arc norm.
    """
    if k < 3:
        raise UsageError("a polygon needs at least 3 nodes")
    if radius is None:
        radius = 1.0 / (math.cos(math.pi / k) + math.sin(math.pi / k))
        radius = math.nextafter(radius, 0.0)
    return [(radius * math.cos(2 * math.pi * j / k), radius * math.sin(2 * math.pi * j / k)) for j in range(k)]


def _affine_powers(c0: Ball, c1: Ball, n: int) -> Ball:
    """Ball coefficients of (c0 + c1 s)^k for k = 0..n, shape (n+1, n+1)."""
    dtype = np.result_type(c0.mid, c1.mid)
    mid = np.zeros((n + 1, n + 1), dtype=dtype)
    rad = np.zeros((n + 1, n + 1))
    mid[0, 0] = 1.0
    cur = Ball(mid[0].copy(), rad[0].copy())
    for k in range(1, n + 1):
        shifted = Ball(np.concatenate([[0.0], cur.mid[:-1]]).astype(dtype), np.concatenate([[0.0], cur.rad[:-1]]))
        cur = cur * Ball(np.broadcast_to(c0.mid, cur.shape), np.broadcast_to(c0.rad, cur.shape)) \
            + shifted * Ball(np.broadcast_to(c1.mid, cur.shape), np.broadcast_to(c1.rad, cur.shape))
        mid[k], rad[k] = cur.mid, cur.rad
    return Ball(mid, rad)


def compose_affine(chart: LocalChart, z1: tuple, z2: tuple) -> Ball:
    """Ball coefficients of P(z1(s), z2(s)) with affine z = (c0, c1)."""
    N = chart.N
    B1 = _affine_powers(Ball(np.asarray(z1[0])), Ball(np.asarray(z1[1])), N)
    B2 = _affine_powers(Ball(np.asarray(z2[0])), Ball(np.asarray(z2[1])), N)
    out_mid, out_rad = [], []
    B1T = Ball(B1.mid.T.copy(), B1.rad.T.copy())
    for i in range(3):
        p = chart.coeffs[i]
        G = ball_matmul_dot2(B1T, p)  # G[j, a2] = sum_a1 B1[a1, j] p[a1, a2]
        H = ball_matmul_dot2(G, B2)  # H[j, k]
        # anti-diagonal sums, correctly rounded with fsum
        m, r = _antidiagonal_sums(H)
        out_mid.append(m)
        out_rad.append(r)
    return Ball(np.array(out_mid), np.array(out_rad))


def _antidiagonal_sums(H: Ball) -> tuple[np.ndarray, np.ndarray]:
    n = H.shape[0] + H.shape[1] - 1
    flip_m = H.mid[:, ::-1]
    flip_r = H.rad[:, ::-1]
    cplx = np.iscomplexobj(flip_m)
    m = np.zeros(n, dtype=complex if cplx else float)
    r = np.zeros(n)
    for l in range(n):
        off = H.shape[1] - 1 - l
        d = np.diagonal(flip_m, offset=off)
        rr = math.fsum(np.diagonal(flip_r, offset=off))
        if cplx:
            re, im = math.fsum(d.real), math.fsum(d.imag)
            m[l] = complex(re, im)
            r[l] = rr + U * (abs(re) + abs(im))
        else:
            re = math.fsum(d)
            m[l] = re
            r[l] = rr + U * abs(re)
    return m, inflate(r, 3)


def boundary_arcs(chart: LocalChart, mesh: str = "square", k: int = 20, radius: float | None = None,
                  order: int | None = None, pieces: int = 1) -> list:
    """Lift the boundary polygon of the parameter domain through the chart.

    Real eigendata use the eight half-edges of the unit square; complex data
    a k-gon in the unit disk through P(z, conj z). Each returned arc has
    degree ``order`` (default: chart order); the composition tail beyond
    that degree, the coefficient radii and the chart error ``r_hat`` go into
    the arc error. ``pieces`` splits every segment into equal sub-segments.
    """
    if chart.r_hat is None:
        raise CertificationError("chart must be validated first")
    order = chart.N if order is None else int(order)
    if mesh == "square":
        nodes = list(SQUARE_NODES)
    elif mesh == "polygon":
        nodes = polygon_nodes(k, radius)
    else:
        raise UsageError(f"unknown boundary mesh {mesh!r}")
    arcs = []
    for j in range(len(nodes)):
        u, v = np.array(nodes[j], float), np.array(nodes[(j + 1) % len(nodes)], float)
        for p in range(pieces):
            a = u + (v - u) * (p / pieces)
            b = u + (v - u) * ((p + 1) / pieces)
            arcs.append(_lift_segment(chart, a, b, order))
    return arcs


def _compose_arb(chart: LocalChart, z1: tuple, z2: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Real arc coefficients of P(z1(s), z2(s)) for the chart midpoints.

    The composition is done in 128-bit ball polynomials and rounded once;
    returns the float coefficients and the l1 rounding error per component.
    """
    from flint import acb, acb_poly, arb, arb_poly, ctx

    old = ctx.prec
    ctx.prec = 128
    try:
        cplx = chart.is_complex
        if cplx:
            num = lambda v: acb(complex(v).real, complex(v).imag)
            Poly = acb_poly
        else:
            num = lambda v: arb(float(v))
            Poly = arb_poly
        w1 = Poly([num(z1[0]), num(z1[1])])
        w2 = Poly([num(z2[0]), num(z2[1])])
        N = chart.N
        out_mid = np.zeros((3, N + 1))
        out_rad = np.zeros(3)
        for i in range(3):
            c = chart.coeffs.mid[i]
            total = Poly([])
            for a1 in range(N, -1, -1):
                inner = Poly([])
                for a2 in range(N - a1, -1, -1):
                    inner = inner * w2 + Poly([num(c[a1, a2])])
                total = total * w1 + inner
            co = total.coeffs()
            vals = [v.real if cplx else v for v in co]
            m, r = _arb_to_ball(vals, False) if vals else (np.zeros(0), np.zeros(0))
            out_mid[i, : len(m)] = m
            out_rad[i] = float(inflate(r.sum(), len(r) + 1)) if len(r) else 0.0
    finally:
        ctx.prec = old
    return out_mid, out_rad


def _lift_segment(chart: LocalChart, a: np.ndarray, b: np.ndarray, order: int) -> BoundaryArc:
    c0 = (a + b) / 2.0
    c1 = (b - a) / 2.0
    if chart.is_complex:
        z1 = (complex(c0[0], c0[1]), complex(c1[0], c1[1]))
        z2 = (z1[0].conjugate(), z1[1].conjugate())
    else:
        z1 = (float(c0[0]), float(c1[0]))
        z2 = (float(c0[1]), float(c1[1]))
    for z in (z1, z2):
        if up(abs(z[0]) + abs(z[1])) > 1.0 + 4 * U:
            raise DomainError("segment leaves the unit polydisk in the l1 sense")
    mid, radsum = _compose_arb(chart, z1, z2)
    n = mid.shape[1]
    keep = min(order + 1, n)
    coeffs = np.zeros((3, order + 1))
    coeffs[:, :keep] = mid[:, :keep]
    tail = np.sum(np.abs(mid[:, keep:]), axis=1)
    # coefficient radii of the chart pass through unchanged: |z1| + |z2| <= 1
    err_c = inflate(tail + radsum + chart.coeff_radius, n + 2 + chart.N)
    err = up(float(np.max(err_c)) + chart.r_hat)
    return BoundaryArc(coeffs, err, (tuple(a), tuple(b)))
