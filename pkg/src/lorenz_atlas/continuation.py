"""Advection of boundary arcs: stepping, subdivision, clipping, the atlas.

Every frontier arc carries an :class:`~lorenz_atlas.integrator.ErrorLedger`
and its parameter range in the coordinates of the initial boundary arc it
descends from. Cut points are snapped to a dyadic grid so that the
recentering parameters of every piece are exact floats.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .equilibria import LorenzParams, lorenz_field
from .errors import UsageError, ValidationError
from .integrator import (DEFAULT_EPS, MACHINE_MU, Chart, ErrorLedger, StepInput,
                         collapse_grid, single_step)
from .interval import inflate
from .sequences import BOX, MultiSeries, recenter_rescale

log = logging.getLogger(__name__)

DYADIC = 2 ** 30
THREADS_ENV = "LORENZ_ATLAS_THREADS"


# ---------------------------------------------------------------------------
# small types


@dataclass(frozen=True)
class ClipBox:
    """Axis aligned box ``lo <= x <= hi`` in phase space."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise UsageError("a clip box has three intervals")
        if any(not a < b for a, b in zip(lo, hi)):
            raise UsageError("clip box intervals must be nonempty")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, points: np.ndarray, r: float = 0.0) -> np.ndarray:
        """True where the l-infinity ball of radius r about a point lies in K."""
        p = np.atleast_2d(points)
        return np.all((p - r >= np.array(self.lo)) & (p + r <= np.array(self.hi)), axis=-1)


@dataclass
class SubdivisionPlan:
    """Cut points of [-1, 1] with the sampled separation profile."""

    nodes: np.ndarray
    sigma: np.ndarray
    cuts: list  # (s_star, delta) per piece, left to right
    pieces: int

    @property
    def breakpoints(self) -> list:
        return [self.cuts[0][0] - self.cuts[0][1]] + [s + d for s, d in self.cuts]

    @classmethod
    def uniform(cls, pieces: int) -> "SubdivisionPlan":
        b = [_dyadic(-1.0 + 2.0 * i / pieces) for i in range(pieces + 1)]
        return cls(np.array(b), np.zeros(pieces + 1), _cuts_from_breaks(b), pieces)


def _dyadic(x: float) -> float:
    return round(x * DYADIC) / DYADIC


def _cuts_from_breaks(b: list) -> list:
    # midpoints and half widths of dyadic breakpoints are exact
    return [((lo + hi) / 2, (hi - lo) / 2) for lo, hi in zip(b[:-1], b[1:])]


# ---------------------------------------------------------------------------
# collapse and the sigma heuristic


def collapse(chart: Chart) -> tuple[MultiSeries, float]:
    """The arc Gamma(s, 1) and an l1 error bound for it."""
    arc, err = collapse_grid(chart.coeffs)
    r = float(inflate(chart.r + err, 1))
    if chart.next_ledger is not None:
        r = min(r, chart.next_ledger.total())
    return MultiSeries(arc, BOX), r


def _eval_arc(g: np.ndarray, s: np.ndarray) -> np.ndarray:
    return np.stack([np.polynomial.polynomial.polyval(s, g[i]) for i in range(3)], axis=-1)


def _rk4(x: np.ndarray, T: float, h: float, params: LorenzParams, J: int | None = None):
    """Fixed step RK4 trajectories; returns the (J+1, n, 3) samples."""
    J = J or max(1, int(math.ceil(abs(T) / h)))
    dt = T / J
    out = np.empty((J + 1,) + x.shape)
    out[0] = x
    f = lambda y: lorenz_field(y, params)
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(J):
            k1 = f(x)
            k2 = f(x + 0.5 * dt * k1)
            k3 = f(x + 0.5 * dt * k2)
            k4 = f(x + dt * k3)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            out[j + 1] = x
    return out


def sigma_profile(arc, T: float, I: int = 128, J: int | None = None, pieces: int = 4,
                  params: LorenzParams | None = None, h: float = 1e-3) -> SubdivisionPlan:
    """Cut points that equidistribute the integrated separation of neighbours."""
    if I < 3:
        raise UsageError("need at least 3 sample nodes")
    if pieces < 1:
        raise UsageError("pieces must be positive")
    params = params or LorenzParams.classical()
    g = arc.coeffs if isinstance(arc, MultiSeries) else np.asarray(arc, dtype=float)
    s = np.linspace(-1.0, 1.0, I + 1)
    traj = _rk4(_eval_arc(g, s), T, h, params, J)  # (J+1, I+1, 3)
    if not np.all(np.isfinite(traj)):
        log.warning("sigma profile integration blew up; using uniform cuts")
        return SubdivisionPlan.uniform(pieces)
    gap = np.linalg.norm(np.diff(traj, axis=1), axis=-1)  # (J+1, I)
    w = np.full(traj.shape[0], abs(T) / max(1, traj.shape[0] - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    gi = w @ gap  # integrated gap per interval
    sigma = np.empty(I + 1)
    sigma[1:-1] = 0.5 * (gi[:-1] + gi[1:])
    sigma[0], sigma[-1] = gi[0], gi[-1]
    dens = 0.5 * (sigma[:-1] + sigma[1:]) * np.diff(s)
    cum = np.concatenate([[0.0], np.cumsum(dens)])
    total = cum[-1]
    if not total > 0 or np.ptp(sigma) <= 1e-12 * max(1.0, sigma.max()):
        plan = SubdivisionPlan.uniform(pieces)
        plan.nodes, plan.sigma = s, sigma
        return plan
    targets = total * np.arange(1, pieces) / pieces
    inner = np.interp(targets, cum, s)
    b = [-1.0] + [_dyadic(v) for v in inner] + [1.0]
    for i in range(1, len(b)):  # keep pieces nondegenerate
        b[i] = max(b[i], b[i - 1] + 1.0 / DYADIC)
    if b[-2] >= 1.0:
        return SubdivisionPlan.uniform(pieces)
    b[-1] = 1.0
    return SubdivisionPlan(s, sigma, _cuts_from_breaks(b), pieces)


# ---------------------------------------------------------------------------
# subdivision and clipping


def subdivide(arc, r: float, plan: SubdivisionPlan) -> list:
    """Certified restriction of an arc to each piece of a plan."""
    series = arc if isinstance(arc, MultiSeries) else MultiSeries(np.asarray(arc, dtype=float), BOX)
    out = []
    for s_star, delta in plan.cuts:
        if s_star == 0.0 and delta == 1.0:
            out.append((series, float(r)))
            continue
        child, rad = recenter_rescale(series, s_star, delta, certified=True)
        out.append((child, float(inflate(r + rad, 1))))
    return out


def clip_intervals(arc, r: float, box: ClipBox, samples: int = 257, iters: int = 50) -> list:
    """Maximal parameter subintervals whose sampled images stay inside K."""
    g = arc.coeffs if isinstance(arc, MultiSeries) else np.asarray(arc, dtype=float)
    s = np.linspace(-1.0, 1.0, samples)
    inside = box.contains(_eval_arc(g, s), r)
    if inside.all():
        return [(-1.0, 1.0)]
    if not inside.any():
        return []
    ok = lambda x: bool(box.contains(_eval_arc(g, np.array([x])), r)[0])

    def cross(a, b):  # a inside, b outside
        for _ in range(iters):
            m = 0.5 * (a + b)
            if ok(m):
                a = m
            else:
                b = m
        return a

    runs = []
    i = 0
    while i < samples:
        if not inside[i]:
            i += 1
            continue
        j = i
        while j + 1 < samples and inside[j + 1]:
            j += 1
        lo = -1.0 if i == 0 else cross(s[i], s[i - 1])
        hi = 1.0 if j == samples - 1 else cross(s[j], s[j + 1])
        lo = -1.0 if i == 0 else math.ceil(lo * DYADIC) / DYADIC
        hi = 1.0 if j == samples - 1 else math.floor(hi * DYADIC) / DYADIC
        if hi > lo:
            runs.append((lo, hi))
        i = j + 1
    return runs


def clip(arc, r: float, box: ClipBox, samples: int = 257) -> list:
    """Restrictions of an arc to its maximal inside-K parameter runs."""
    runs = clip_intervals(arc, r, box, samples)
    plan_cuts = _cuts_from_breaks_pairs(runs)
    return subdivide(arc, r, SubdivisionPlan(np.array([]), np.array([]), plan_cuts, len(plan_cuts))) if runs else []


def _cuts_from_breaks_pairs(runs: list) -> list:
    return [((lo + hi) / 2, (hi - lo) / 2) for lo, hi in runs]


# ---------------------------------------------------------------------------
# the atlas


@dataclass
class FrontierArc:
    """An arc waiting to be advanced."""

    coeffs: np.ndarray
    ledger: ErrorLedger
    t: Fraction
    root: int
    s_range: tuple  # (lo, hi) in the initial arc's parameter
    parent: int | None = None
    generation: int = 0

    def restrict(self, s_star: float, delta: float) -> "FrontierArc":
        if s_star == 0.0 and delta == 1.0:
            return self
        child, rad = recenter_rescale(MultiSeries(self.coeffs, BOX), s_star, delta, certified=True)
        led, extra = self.ledger.restrict(s_star, delta)
        led.add(float(inflate(rad + extra, 1)))
        lo, hi = self.s_range
        w = (hi - lo) / 2
        rng = (lo + w * (s_star - delta + 1.0), lo + w * (s_star + delta + 1.0))
        return FrontierArc(child.coeffs, led, self.t, self.root, rng, self.parent, self.generation)


@dataclass
class Retired:
    root: int
    s_range: tuple
    t: float
    parent: int | None


@dataclass
class TableRow:
    tau: float
    error: float
    charts: int


@dataclass
class Atlas:
    """Certified charts of the advected boundary plus the run's bookkeeping.

    ``local_error`` is the error of the local chart the boundary arcs were
    lifted from; ``initial_errors`` are the errors of those arcs and
    ``initial_arcs`` their (3, n+1) coefficients.
    """

    T: float
    local_error: float = 0.0
    initial_errors: list = field(default_factory=list)
    charts: list = field(default_factory=list)
    retired: list = field(default_factory=list)
    complete: bool = True
    meta: dict = field(default_factory=dict)
    initial_arcs: list = field(default_factory=list)

    @property
    def chart_count(self) -> int:
        return len(self.charts)

    @property
    def direction(self) -> int:
        return -1 if self.T < 0 else 1

    def by_id(self) -> dict:
        return {c.arc_id: c for c in self.charts}

    def generations(self) -> int:
        return 1 + max((c.generation for c in self.charts), default=-1)

    def error_sequence(self) -> list:
        """Running maximum of the error per generation, starting at the local chart."""
        seq = [max([self.local_error] + list(self.initial_errors))]
        per = {}
        for c in self.charts:
            per[c.generation] = max(per.get(c.generation, 0.0), c.r)
        for g in sorted(per):
            seq.append(max(seq[-1], per[g]))
        return seq

    def time_sequence(self) -> list:
        ends = sorted({abs(c.t1) for c in self.charts})
        return [0.0] + ends

    def max_error(self) -> float:
        return self.error_sequence()[-1]

    def frontier_ranges(self) -> dict:
        """Parameter ranges of the newest chart along each lineage, per root."""
        parents = {c.parent_id for c in self.charts if c.parent_id is not None}
        out: dict = {}
        for c in self.charts:
            if c.arc_id not in parents:
                out.setdefault(c.root, []).append(c.s_range)
        return out


def export_tables(atlas: Atlas, checkpoints) -> list:
    """Rows (tau, running max error, charts needed to reach tau)."""
    rows = []
    base = max([atlas.local_error] + list(atlas.initial_errors))
    for tau in checkpoints:
        tau = float(tau)
        if tau == 0.0:
            rows.append(TableRow(0.0, base, len(atlas.initial_errors)))
            continue
        if tau * atlas.T < 0 or abs(tau) > abs(atlas.T) * (1 + 1e-12):
            raise UsageError(f"checkpoint {tau} is outside the run horizon {atlas.T}")
        used = [c for c in atlas.charts if abs(c.t0) < abs(tau) * (1 - 1e-12)]
        err = max([base] + [c.r for c in used])
        rows.append(TableRow(tau, err, len(used)))
    return rows


# ---------------------------------------------------------------------------
# globalization


@dataclass
class StepPolicy:
    """Orders, budget and subdivision settings for one run."""

    N: int = 24
    M: int | None = None
    eps: float = DEFAULT_EPS
    mu: float = MACHINE_MU
    target_error: float | None = None
    expected_steps: int = 10
    pieces: int = 4
    max_depth: int = 6
    sigma_nodes: int = 128
    sigma_step: float = 1e-3
    max_charts: int = 200000
    clip_samples: int = 257
    stall_ratio: float = 0.7

    def __post_init__(self):
        if self.M is None:
            self.M = max(1, int(round(self.eps * self.N)))
        if self.N < 1 or self.M < 1:
            raise UsageError("integrator orders must be at least 1")
        if self.pieces < 2:
            raise UsageError("subdivision needs at least 2 pieces")

    @property
    def budget(self) -> float:
        if self.target_error is None:
            return math.inf
        return self.target_error / max(1, self.expected_steps)


class GlobalizationError(ValidationError):
    """A frontier arc could not be advanced even after maximal subdivision."""

    def __init__(self, message, atlas=None, arc=None, bounds=None):
        super().__init__(message, bounds)
        self.atlas = atlas
        self.arc = arc


def _attempt(fa: FrontierArc, T: Fraction, policy: StepPolicy, params: LorenzParams, depth: int,
             parent_fresh: float | None = None):
    """Advance one arc, subdividing until every piece certifies within budget.

    An over-budget step is still accepted when splitting did not lower the
    new error appreciably (the piece sits at the rounding floor) or the
    depth limit is reached. Certification failures at the depth limit abort.
    Returns a list of (piece, chart) in parameter order.
    """
    remaining = abs(T - fa.t)
    direction = -1 if T < 0 else 1
    inp = StepInput(fa.coeffs, N=policy.N, M=policy.M, mu=policy.mu, params=params,
                    ledger=fa.ledger, t0=float(fa.t), direction=direction,
                    max_step=float(remaining))
    try:
        chart = single_step(inp)
    except ValidationError as exc:
        chart, err = None, str(exc)
        horizon = direction * min(float(remaining), 0.05)
    else:
        if chart.fresh <= policy.budget:
            return [(fa, chart)]
        stalled = parent_fresh is not None and chart.fresh > policy.stall_ratio * parent_fresh
        if stalled or depth >= policy.max_depth:
            log.debug("accepting over-budget step root=%d s=%s fresh=%.3e", fa.root, fa.s_range, chart.fresh)
            return [(fa, chart)]
        err = f"fresh error {chart.fresh:.3e} over budget {policy.budget:.3e}"
        horizon = chart.L
    if depth >= policy.max_depth:
        raise GlobalizationError(
            f"arc root={fa.root} s=[{fa.s_range[0]:.9g}, {fa.s_range[1]:.9g}] t={float(fa.t):.6g} "
            f"failed after {depth} subdivisions: {err}", arc=fa)
    log.debug("subdividing root=%d s=%s t=%.6g depth=%d: %s", fa.root, fa.s_range, float(fa.t), depth, err)
    plan = sigma_profile(fa.coeffs, horizon, I=policy.sigma_nodes, pieces=policy.pieces,
                         params=params, h=policy.sigma_step)
    fresh = chart.fresh if chart is not None else None
    out = []
    for s_star, delta in plan.cuts:
        out.extend(_attempt(fa.restrict(s_star, delta), T, policy, params, depth + 1, fresh))
    return out


def fixed_schedule(arcs, steps: int, pieces: int = 4, policy: StepPolicy | None = None,
                   params: LorenzParams | None = None, direction: int = 1) -> Atlas:
    """Take ``steps`` steps, splitting every arc uniformly between steps.

    No budget or adaptive subdivision is applied; each arc takes its own
    natural step length, so lineages end at different times.
    """
    policy = policy or StepPolicy()
    params = params or LorenzParams.classical()
    init = _initial(arcs)
    atlas = Atlas(float(direction) * math.inf, 0.0, [r for _, r in init])
    atlas.initial_arcs = [g for g, _ in init]
    frontier = [FrontierArc(g, ErrorLedger.scalar(policy.N, r), Fraction(0), root, (-1.0, 1.0))
                for root, (g, r) in enumerate(init)]
    plan = SubdivisionPlan.uniform(pieces)
    for k in range(steps):
        nxt = []
        for fa in frontier:
            chart = single_step(StepInput(fa.coeffs, N=policy.N, M=policy.M, mu=policy.mu, params=params,
                                          ledger=fa.ledger, t0=float(fa.t), direction=direction))
            chart.arc_id, chart.parent_id, chart.root = len(atlas.charts), fa.parent, fa.root
            chart.s_range, chart.generation = fa.s_range, k
            atlas.charts.append(chart)
            if k + 1 < steps:
                nfa = FrontierArc(chart.next_arc, chart.next_ledger, fa.t + Fraction(chart.L), fa.root,
                                  fa.s_range, chart.arc_id, k + 1)
                nxt.extend(nfa.restrict(s, d) for s, d in plan.cuts)
        frontier = nxt
    atlas.T = direction * max(abs(c.t1) for c in atlas.charts) if atlas.charts else 0.0
    return atlas


def _threads(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    v = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(v)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {v!r}")
    return n


def _initial(arcs) -> list:
    out = []
    for a in arcs:
        if hasattr(a, "coeffs") and hasattr(a, "error"):
            out.append((np.asarray(a.coeffs, dtype=float), float(a.error)))
        elif isinstance(a, tuple):
            g, r = a
            out.append((g.coeffs if isinstance(g, MultiSeries) else np.asarray(g, dtype=float), float(r)))
        else:
            g = a.coeffs if isinstance(a, MultiSeries) else np.asarray(a, dtype=float)
            out.append((g, 0.0))
    return out


def globalize(arcs, T: float, policy: StepPolicy | None = None, box: ClipBox | None = None,
              params: LorenzParams | None = None, local_error: float = 0.0,
              workers: int | None = None, progress=None) -> Atlas:
    """Advect boundary arcs for time T (T < 0 for stable manifolds).

    Frontier arcs of one generation are advanced independently (optionally
    in a thread pool); results are merged in frontier order, so the atlas
    does not depend on the number of workers.
    """
    policy = policy or StepPolicy()
    params = params or LorenzParams.classical()
    init = _initial(arcs)
    atlas = Atlas(float(T), local_error, [r for _, r in init])
    atlas.initial_arcs = [g for g, _ in init]
    atlas.meta.update(N=policy.N, M=policy.M, mu=policy.mu, pieces=policy.pieces)
    Tq = Fraction(float(T))
    frontier = []
    for root, (g, r) in enumerate(init):
        fa = FrontierArc(g, ErrorLedger.scalar(policy.N, r), Fraction(0), root, (-1.0, 1.0))
        frontier.extend(_clip_arc(fa, box, policy, atlas))
    nthreads = _threads(workers)
    pool = ThreadPoolExecutor(nthreads) if nthreads > 1 else None
    try:
        while frontier and Tq != 0:
            run = lambda fa: _attempt(fa, Tq, policy, params, 0)
            try:
                results = list(pool.map(run, frontier)) if pool else [run(fa) for fa in frontier]
            except GlobalizationError as exc:
                atlas.complete = False
                exc.atlas = atlas
                raise
            nxt = []
            for pieces in results:
                for piece, chart in pieces:
                    chart.arc_id = len(atlas.charts)
                    chart.parent_id = piece.parent
                    chart.root = piece.root
                    chart.s_range = piece.s_range
                    chart.generation = piece.generation
                    atlas.charts.append(chart)
                    b = chart.bounds
                    log.debug("chart %d root=%d L=%.6g r=%.3e Y0=%.3e Z0=%.3e Z1=%.3e Z2=%.3e", chart.arc_id,
                              chart.root, chart.L, chart.r, b.Y0, b.Z0, b.Z1, b.Z2)
                    if len(atlas.charts) > policy.max_charts:
                        atlas.complete = False
                        raise GlobalizationError(f"chart limit {policy.max_charts} reached", atlas=atlas)
                    t1 = piece.t + Fraction(chart.L)
                    if abs(t1) >= abs(Tq):
                        continue
                    fa = FrontierArc(chart.next_arc, chart.next_ledger, t1, piece.root,
                                     piece.s_range, chart.arc_id, piece.generation + 1)
                    nxt.extend(_clip_arc(fa, box, policy, atlas))
            frontier = nxt
            if progress is not None:
                progress(atlas, len(frontier))
            log.info("generation done: charts=%d frontier=%d max error=%.3e",
                     len(atlas.charts), len(frontier), atlas.max_error())
    finally:
        if pool:
            pool.shutdown()
    return atlas


def _clip_arc(fa: FrontierArc, box: ClipBox | None, policy: StepPolicy, atlas: Atlas) -> list:
    if box is None:
        return [fa]
    r = fa.ledger.total()
    runs = clip_intervals(fa.coeffs, r, box, policy.clip_samples)
    if runs == [(-1.0, 1.0)]:
        return [fa]
    lo, hi = fa.s_range
    w = (hi - lo) / 2
    kept, prev = [], -1.0
    for a, b in runs + [(1.0, 1.0)]:
        if a > prev:
            atlas.retired.append(Retired(fa.root, (lo + w * (prev + 1), lo + w * (a + 1)), float(fa.t), fa.parent))
        if b > a:
            kept.append(fa.restrict((a + b) / 2, (b - a) / 2))
        prev = b
    return kept
