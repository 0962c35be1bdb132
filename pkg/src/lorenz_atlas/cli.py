"""Command line front end: run configs, atlas files, tables and meshes.

Verbs::

    lorenz-atlas run CONFIG.ini [--horizon T] [--threads N] ...
    lorenz-atlas export-mesh ATLAS.jsonl --density 8 --out mesh.obj
    lorenz-atlas verify ATLAS.jsonl --samples 200
    lorenz-atlas table ATLAS.jsonl --checkpoints 0,-0.05,-0.1 --expected BANDS.ini

Exit status: 0 on success, 2 when a certification or verification fails,
3 when a config or input file is unusable.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .continuation import (THREADS_ENV, Atlas, ClipBox, GlobalizationError, Retired, StepPolicy,
                           export_tables, globalize)
from .equilibria import (EQUILIBRIUM_NAMES, LocalChart, LorenzParams, boundary_arcs, local_chart,
                         polygon_nodes)
from .errors import AtlasError, CertificationError, ConfigError, DomainError, UsageError
from .integrator import MACHINE_MU, Chart, orders_from_effort
from .interval import Ball
from .validation import ValidationBounds

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONFIG = 3

ATLAS_FORMAT = "lorenz-atlas/1"
MESH_FORMAT = "lorenz-atlas-mesh 1"


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Everything a run needs; one INI section per group of fields."""

    sigma: str = "10"
    rho: str = "28"
    beta: str = "8/3"
    equilibrium: str = "origin"
    stability: str = "stable"
    order: int = 50
    scalings: tuple | None = None
    precision: str = "extended"
    tail_method: str = "lemma"
    mesh: str = "square-8"
    arc_order: int | None = None
    N: int | None = 24
    M: int | None = None
    eps: float = 0.6
    effort: int | None = None
    horizon: float = 0.0
    target_error: float | None = None
    expected_steps: int = 10
    pieces: int = 4
    max_depth: int = 6
    stall_ratio: float = 0.7
    sigma_nodes: int = 128
    sigma_step: float = 1e-3
    max_charts: int = 200000
    clip: tuple | None = None
    checkpoints: tuple = ()
    atlas: str = "atlas.jsonl"
    table: str | None = None
    mesh_file: str | None = None
    mesh_density: int = 8
    threads: int | None = None

    # -- derived pieces

    def params(self) -> LorenzParams:
        return LorenzParams(self.sigma, self.rho, self.beta)

    def boundary(self) -> tuple[str, int]:
        kind, _, k = self.mesh.partition("-")
        return ("square", 8) if kind == "square" else ("polygon", int(k))

    def orders(self) -> tuple[int, int]:
        if self.M is not None and self.N is not None:
            return self.M, self.N
        if self.effort is not None:
            return orders_from_effort(None, self.eps, self.effort)
        return orders_from_effort(self.N, self.eps)

    def policy(self) -> StepPolicy:
        M, N = self.orders()
        return StepPolicy(N=N, M=M, eps=self.eps, target_error=self.target_error,
                          expected_steps=self.expected_steps, pieces=self.pieces, max_depth=self.max_depth,
                          sigma_nodes=self.sigma_nodes, sigma_step=self.sigma_step,
                          max_charts=self.max_charts, stall_ratio=self.stall_ratio)

    def box(self) -> ClipBox | None:
        if self.clip is None:
            return None
        c = self.clip
        return ClipBox((c[0], c[2], c[4]), (c[1], c[3], c[5]))

    def validate(self) -> "RunConfig":
        try:
            for name in ("sigma", "rho", "beta"):
                Fraction(getattr(self, name))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"[params] {name} = {getattr(self, name)!r} is not a number") from None
        if self.equilibrium not in EQUILIBRIUM_NAMES:
            raise ConfigError(f"[manifold] equilibrium must be one of {', '.join(EQUILIBRIUM_NAMES)}")
        if self.stability not in ("stable", "unstable"):
            raise ConfigError("[manifold] stability must be 'stable' or 'unstable'")
        if self.precision not in ("extended", "double"):
            raise ConfigError("[manifold] precision must be 'extended' or 'double'")
        kind, _, k = self.mesh.partition("-")
        if not (self.mesh == "square-8" or (kind == "polygon" and k.isdigit() and int(k) >= 3)):
            raise ConfigError(f"[boundary] mesh must be 'square-8' or 'polygon-<k>' with k >= 3, got {self.mesh!r}")
        for name in ("order", "N", "M", "effort", "arc_order"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"order {name} = {v} must be at least 1")
        if self.N is None and self.effort is None:
            raise ConfigError("[integrator] needs N or effort")
        if self.eps <= 0:
            raise ConfigError("[integrator] eps must be positive")
        if self.scalings is not None and (len(self.scalings) != 2 or min(self.scalings) <= 0):
            raise ConfigError("[manifold] scalings needs two positive lengths")
        if not math.isfinite(self.horizon):
            raise ConfigError("[run] horizon must be finite")
        if self.stability == "stable" and self.horizon > 0:
            raise ConfigError("a stable manifold grows in backward time: horizon must be <= 0")
        if self.stability == "unstable" and self.horizon < 0:
            raise ConfigError("an unstable manifold grows in forward time: horizon must be >= 0")
        for tau in self.checkpoints:
            if tau * self.horizon < 0 or abs(tau) > abs(self.horizon):
                raise ConfigError(f"checkpoint {tau} lies outside the horizon {self.horizon}")
        if self.pieces < 2:
            raise ConfigError("[run] pieces must be at least 2")
        if self.expected_steps < 1 or self.max_depth < 0 or self.sigma_nodes < 2 or self.max_charts < 1:
            raise ConfigError("[run] step settings must be positive")
        if self.target_error is not None and not self.target_error > 0:
            raise ConfigError("[run] target_error must be positive")
        if self.clip is not None:
            if len(self.clip) != 6 or any(self.clip[2 * i] >= self.clip[2 * i + 1] for i in range(3)):
                raise ConfigError("[clip] needs lo < hi for x, y and z")
        if self.mesh_density < 2:
            raise ConfigError("[output] mesh_density must be at least 2")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("[output] threads must be at least 1")
        return self


# (section, key, attribute, kind); clip is handled separately (x, y, z keys)
_SCHEMA = [
    ("params", "sigma", "sigma", "str"),
    ("params", "rho", "rho", "str"),
    ("params", "beta", "beta", "str"),
    ("manifold", "equilibrium", "equilibrium", "str"),
    ("manifold", "stability", "stability", "str"),
    ("manifold", "order", "order", "int"),
    ("manifold", "scalings", "scalings", "floats?"),
    ("manifold", "precision", "precision", "str"),
    ("manifold", "tail_method", "tail_method", "str"),
    ("boundary", "mesh", "mesh", "str"),
    ("boundary", "arc_order", "arc_order", "int?"),
    ("integrator", "N", "N", "int?"),
    ("integrator", "M", "M", "int?"),
    ("integrator", "eps", "eps", "float"),
    ("integrator", "effort", "effort", "int?"),
    ("run", "horizon", "horizon", "float"),
    ("run", "target_error", "target_error", "float?"),
    ("run", "expected_steps", "expected_steps", "int"),
    ("run", "pieces", "pieces", "int"),
    ("run", "max_depth", "max_depth", "int"),
    ("run", "stall_ratio", "stall_ratio", "float"),
    ("run", "sigma_nodes", "sigma_nodes", "int"),
    ("run", "sigma_step", "sigma_step", "float"),
    ("run", "max_charts", "max_charts", "int"),
    ("run", "checkpoints", "checkpoints", "floats"),
    ("output", "atlas", "atlas", "str"),
    ("output", "table", "table", "str?"),
    ("output", "mesh_file", "mesh_file", "str?"),
    ("output", "mesh_density", "mesh_density", "int"),
    ("output", "threads", "threads", "int?"),
]
_AXES = ("x", "y", "z")


def _convert(kind: str, text: str):
    text = text.strip()
    if kind.endswith("?"):
        if text.lower() in ("", "none"):
            return None
        kind = kind[:-1]
    if kind == "str":
        return text
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "floats":
        return tuple(float(v) for v in text.replace(",", " ").split())
    raise AssertionError(kind)


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Parse INI text into a validated RunConfig."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    known = {(s, k): (a, kind) for s, k, a, kind in _SCHEMA}
    values = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if section == "clip":
                if key not in _AXES:
                    raise ConfigError(f"[clip] has keys x, y, z only, got {key!r}")
                continue
            if (section, key) not in known:
                raise ConfigError(f"unknown config entry [{section}] {key}")
            attr, kind = known[(section, key)]
            try:
                values[attr] = _convert(kind, raw)
            except ValueError:
                raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.rstrip('?')}") from None
    if cp.has_section("clip"):
        try:
            pairs = [_convert("floats", cp.get("clip", a)) for a in _AXES]
        except (configparser.NoOptionError, ValueError):
            raise ConfigError("[clip] needs x, y and z as 'lo, hi'") from None
        if any(len(p) != 2 for p in pairs):
            raise ConfigError("[clip] needs x, y and z as 'lo, hi'")
        values["clip"] = tuple(v for p in pairs for v in p)
    return RunConfig(**values).validate()


def serialize_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, key, attr, _ in _SCHEMA:
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, _render(getattr(cfg, attr)))
    if cfg.clip is not None:
        cp.add_section("clip")
        for i, a in enumerate(_AXES):
            cp.set("clip", a, _render(cfg.clip[2 * i:2 * i + 2]))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# atlas files


@dataclass
class AtlasFile:
    """In-memory form of an atlas file.

    Records, one JSON object per line: ``header`` (format, versions, machine
    unit, config echo), optionally ``local`` (the local chart), one ``arc``
    per initial boundary arc, one ``chart`` per certified patch, one
    ``retired`` per clipped-away piece and a closing ``summary``.
    """

    atlas: Atlas
    local: LocalChart | None = None
    config: RunConfig | None = None
    header: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def _floats(a: np.ndarray) -> list:
    a = np.asarray(a, dtype=float).ravel()
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite coefficients cannot be stored")
    return a.tolist()


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (int, float, str, bool)) or v is None:
        return v
    return None


def _bounds_record(b: ValidationBounds) -> dict:
    extra = {k: _jsonable(v) for k, v in b.extra.items() if _jsonable(v) is not None}
    return {"Y0": b.Y0, "Z0": b.Z0, "Z1": b.Z1, "Z2": b.Z2, "r_minus": b.r_minus, "r_plus": b.r_plus,
            "extra": extra}


def _chart_record(c: Chart) -> dict:
    return {"type": "chart", "id": c.arc_id, "parent": c.parent_id, "root": c.root,
            "generation": c.generation, "s_range": [float(c.s_range[0]), float(c.s_range[1])],
            "t0": float(c.t0), "L": float(c.L), "t1": float(c.t1), "M": c.M, "N": c.N,
            "r": float(c.r), "r_defect": float(c.r_defect), "fresh": float(c.fresh),
            "bounds": _bounds_record(c.bounds), "coeffs": _floats(c.coeffs)}


def _local_record(ch: LocalChart) -> dict:
    mid = ch.coeffs.mid
    lam = [[float(np.real(getattr(l, "mid", l))), float(np.imag(getattr(l, "mid", l)))] for l in ch.lambdas]
    return {"type": "local", "N": ch.N, "complex": bool(ch.is_complex), "point": _floats(ch.point),
            "lambdas": lam, "scalings": [float(s) for s in ch.scalings], "r_hat": ch.r_hat,
            "coeff_radius": ch.coeff_radius, "error": ch.error,
            "re": _floats(np.real(mid)), "im": _floats(np.imag(mid)) if np.iscomplexobj(mid) else None}


def save_atlas(path, atlas: Atlas, local: LocalChart | None = None, config: RunConfig | None = None,
               checkpoints=None) -> AtlasFile:
    """Write an atlas file; returns its in-memory form."""
    header = {"type": "header", "format": ATLAS_FORMAT, "version": __version__,
              "numpy": np.__version__, "backend": kernels.BACKEND, "mu": MACHINE_MU,
              "T": float(atlas.T), "local_error": float(atlas.local_error),
              "meta": {k: _jsonable(v) for k, v in atlas.meta.items()},
              "config": serialize_config(config) if config is not None else None}
    if checkpoints is None:
        checkpoints = config.checkpoints if config is not None and config.checkpoints else ()
    rows = [dataclasses.astuple(r) for r in export_tables(atlas, checkpoints)] if atlas.complete else []
    summary = {"type": "summary", "T": float(atlas.T), "complete": atlas.complete,
               "charts": atlas.chart_count, "max_error": atlas.max_error(),
               "error_sequence": atlas.error_sequence(), "table": [list(r) for r in rows]}
    with open(path, "w") as fh:
        def put(rec):
            fh.write(json.dumps(rec, allow_nan=True))
            fh.write("\n")
        put(header)
        if local is not None:
            put(_local_record(local))
        for i, (g, r) in enumerate(zip(atlas.initial_arcs, atlas.initial_errors)):
            put({"type": "arc", "root": i, "error": float(r), "n": int(np.shape(g)[1]) - 1, "coeffs": _floats(g)})
        for c in atlas.charts:
            put(_chart_record(c))
        for rt in atlas.retired:
            put({"type": "retired", "root": rt.root, "s_range": list(rt.s_range), "t": rt.t, "parent": rt.parent})
        put(summary)
    return AtlasFile(atlas, local, config, header, summary)


def _chart_from(rec: dict) -> Chart:
    M, N = rec["M"], rec["N"]
    b = rec["bounds"]
    bounds = ValidationBounds(b["Y0"], b["Z0"], b["Z1"], b["Z2"], b["r_minus"], b["r_plus"], dict(b["extra"]))
    coeffs = np.array(rec["coeffs"], dtype=float).reshape(3, M + 1, N + 1)
    return Chart(coeffs, rec["L"], rec["t0"], rec["r"], rec["r_defect"], bounds, arc_id=rec["id"],
                 parent_id=rec["parent"], s_range=tuple(rec["s_range"]), root=rec["root"],
                 generation=rec["generation"], fresh=rec["fresh"])


def _local_from(rec: dict) -> LocalChart:
    n = rec["N"] + 1
    mid = np.array(rec["re"], dtype=float).reshape(3, n, n)
    if rec["im"] is not None:
        mid = mid + 1j * np.array(rec["im"], dtype=float).reshape(3, n, n)
    lam = tuple(Ball(np.array(complex(a, b) if rec["complex"] else a)) for a, b in rec["lambdas"])
    return LocalChart(Ball(mid), lam, tuple(rec["scalings"]), rec["complex"], np.array(rec["point"]),
                      r_hat=rec["r_hat"], coeff_radius=rec["coeff_radius"])


def load_atlas(path) -> AtlasFile:
    """Read an atlas file; raises OSError when it is missing or malformed."""
    header, summary, local, cfg = None, {}, None, None
    arcs, charts, retired = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["type"]
            except (ValueError, KeyError, TypeError):
                raise OSError(f"{path}:{lineno}: not an atlas record") from None
            if kind == "header":
                header = rec
            elif kind == "local":
                local = _local_from(rec)
            elif kind == "arc":
                arcs.append(rec)
            elif kind == "chart":
                charts.append(_chart_from(rec))
            elif kind == "retired":
                retired.append(Retired(rec["root"], tuple(rec["s_range"]), rec["t"], rec["parent"]))
            elif kind == "summary":
                summary = rec
    if header is None or header.get("format") != ATLAS_FORMAT:
        raise OSError(f"{path}: missing or unknown atlas header")
    ids = {c.arc_id for c in charts}
    for c in charts:
        if c.parent_id is not None and c.parent_id not in ids:
            raise OSError(f"{path}: chart {c.arc_id} names unknown parent {c.parent_id}")
    atlas = Atlas(header["T"], header["local_error"], [a["error"] for a in arcs], charts, retired,
                  summary.get("complete", False), dict(header.get("meta") or {}))
    atlas.initial_arcs = [np.array(a["coeffs"], dtype=float).reshape(3, a["n"] + 1) for a in arcs]
    if header.get("config"):
        try:
            cfg = parse_config(header["config"])
        except ConfigError as exc:
            raise OSError(f"{path}: embedded config is invalid: {exc}") from None
    return AtlasFile(atlas, local, cfg, header, summary)


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RunResult:
    atlas: Atlas
    local: LocalChart
    file: AtlasFile | None = None


def run(cfg: RunConfig, workers: int | None = None, out=None, progress=None) -> RunResult:
    """Local chart, boundary arcs, globalization and (optionally) the atlas file.

    A failed certification still writes the partial atlas before the error
    propagates, so the failing lineage can be inspected.
    """
    cfg.validate()
    params = cfg.params()
    chart = local_chart(params, cfg.equilibrium, cfg.stability, cfg.order, cfg.scalings,
                        method=cfg.tail_method, precision=cfg.precision)
    log.info("local chart: N=%d error=%.3e", chart.N, chart.error)
    workers = workers if workers is not None else (None if os.environ.get(THREADS_ENV) else cfg.threads)
    if cfg.horizon == 0:
        atlas = Atlas(0.0, chart.error)
    else:
        kind, k = cfg.boundary()
        arcs = boundary_arcs(chart, mesh=kind, k=k, order=cfg.arc_order)
        try:
            atlas = globalize(arcs, cfg.horizon, cfg.policy(), cfg.box(), params, chart.error,
                              workers=workers, progress=progress)
        except GlobalizationError as exc:
            if out is not None and exc.atlas is not None:
                save_atlas(out, exc.atlas, chart, cfg, checkpoints=())
            raise
    af = save_atlas(out, atlas, chart, cfg) if out is not None else None
    return RunResult(atlas, chart, af)


# ---------------------------------------------------------------------------
# mesh export


@dataclass
class MeshStats:
    objects: int
    vertices: int
    faces: int
    degenerate: list


def _grid_faces(d: int, base: int) -> list:
    out = []
    for i in range(d - 1):
        for j in range(d - 1):
            a = base + i * d + j
            out.append((a, a + 1, a + d + 1))
            out.append((a, a + d + 1, a + d))
    return out


def _local_samples(local: LocalChart, d: int, radius: float) -> np.ndarray:
    if local.is_complex:
        rho = np.linspace(0.0, radius, d)
        th = np.linspace(0.0, 2 * np.pi, d)
        R, TH = np.meshgrid(rho, th, indexing="ij")
        s1, s2 = R * np.cos(TH), R * np.sin(TH)
    else:
        u = np.linspace(-1.0, 1.0, d)
        s1, s2 = np.meshgrid(u, u, indexing="ij")
    return np.stack(local.evaluate(s1.ravel(), s2.ravel()), axis=-1)


def export_mesh(af: AtlasFile, density: int, path) -> MeshStats:
    """Write every chart as a d x d triangulated grid in OBJ text.

    Layout (ASCII, LF line ends)::

        # lorenz-atlas-mesh 1
        # objects <n> vertices <V> faces <F>
        o <name>              one per chart: "local" or "chart_<id>"
        # time <t>            absolute integration time at the patch midpoint
        # degenerate          only when all sampled vertices coincide
        v <x> <y> <z>         d*d lines, %.17g
        f <i> <j> <k>         2*(d-1)^2 lines, 1-based global indices

    Grid vertices run over parameter s fastest within time t (charts) or
    over the second chart variable within the first (local chart). A
    degenerate object keeps its vertices and has no faces.
    """
    if density < 2:
        raise UsageError("mesh density must be at least 2")
    objects = []
    if af.local is not None:
        radius = 1.0
        if af.config is not None and af.config.boundary()[0] == "polygon":
            radius = math.hypot(*polygon_nodes(af.config.boundary()[1])[0])
        objects.append(("local", 0.0, _local_samples(af.local, density, radius)))
    u = np.linspace(-1.0, 1.0, density)
    w = np.linspace(0.0, 1.0, density)
    S, Tt = np.meshgrid(u, w)
    for c in af.atlas.charts:
        objects.append((f"chart_{c.arc_id}", abs(c.t0 + c.L / 2), c.evaluate(S.ravel(), Tt.ravel())))
    lines, degenerate = [], []
    nv = nf = 0
    for name, t, pts in objects:
        flat = bool(np.all(pts == pts[0]))
        lines.append(f"o {name}")
        lines.append(f"# time {t!r}")
        if flat:
            lines.append("# degenerate")
            degenerate.append(name)
        lines.extend("v %.17g %.17g %.17g" % tuple(p) for p in pts)
        if not flat:
            faces = _grid_faces(density, nv + 1)
            lines.extend("f %d %d %d" % f for f in faces)
            nf += len(faces)
        nv += len(pts)
    head = [f"# {MESH_FORMAT}", f"# objects {len(objects)} vertices {nv} faces {nf}"]
    Path(path).write_text("\n".join(head + lines) + "\n")
    return MeshStats(len(objects), nv, nf, degenerate)


# ---------------------------------------------------------------------------
# verification


@dataclass
class VerifyReport:
    samples: int
    max_defect: float
    max_excess: float
    worst_chart: int | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_excess <= self.tolerance


def _arc_point(g: np.ndarray, s: float) -> np.ndarray:
    return np.array([np.polynomial.polynomial.polyval(s, gi) for gi in g])


def verify_atlas(af: AtlasFile, samples: int = 200, seed: int = 0, tolerance: float = 1e-10) -> VerifyReport:
    """Spot-check charts against reference trajectories from the initial arcs.

    Each sample picks a chart, a parameter and a time in it, flows the
    matching initial-arc point with the reference integrator and compares
    componentwise with the chart. The check fails when some defect exceeds
    the chart's error by more than ``tolerance``.
    """
    from .reference import flow

    atlas = af.atlas
    if not atlas.charts or samples <= 0:
        return VerifyReport(0, 0.0, -math.inf, None, tolerance)
    if len(atlas.initial_arcs) <= max(c.root for c in atlas.charts):
        raise OSError("atlas has no initial arcs to verify against")
    params = af.config.params() if af.config is not None else LorenzParams.classical()
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, len(atlas.charts), samples)
    sig = rng.uniform(-1.0, 1.0, samples)
    tau = rng.uniform(0.0, 1.0, samples)
    worst, max_def, max_exc = None, 0.0, -math.inf
    for k in range(samples):
        c = atlas.charts[pick[k]]
        lo, hi = c.s_range
        s = lo + (sig[k] + 1.0) * (hi - lo) / 2
        x0 = _arc_point(atlas.initial_arcs[c.root], s)
        ref = flow(x0, c.t0 + tau[k] * c.L, params)
        d = float(np.max(np.abs(ref - c.evaluate(sig[k], tau[k]))))
        max_def = max(max_def, d)
        if d - c.r > max_exc:
            max_exc, worst = d - c.r, c.arc_id
    return VerifyReport(samples, max_def, max_exc, worst, tolerance)


# ---------------------------------------------------------------------------
# tables and bands


def read_bands(path) -> list:
    """Expected bands: INI sections with tau, max_error, charts = lo, hi and an optional min_error."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        if not cp.read(path):
            raise ConfigError(f"cannot read band file {path}")
    except configparser.Error as exc:
        raise ConfigError(f"band file syntax: {exc}") from None
    out = []
    for sec in cp.sections():
        try:
            lo, hi = _convert("floats", cp.get(sec, "charts"))
            out.append((sec, cp.getfloat(sec, "tau"), cp.getfloat(sec, "min_error", fallback=0.0),
                        cp.getfloat(sec, "max_error"), int(lo), int(hi)))
        except (configparser.Error, ValueError):
            raise ConfigError(f"band [{sec}] needs tau, max_error and charts = lo, hi") from None
        if not 0.0 <= out[-1][2] <= out[-1][3] or lo > hi:
            raise ConfigError(f"band [{sec}] is empty")
    return out


def check_bands(atlas: Atlas, bands: list) -> list:
    """(name, row, ok) per band."""
    out = []
    for name, tau, min_err, max_err, lo, hi in bands:
        row = export_tables(atlas, [tau])[0]
        out.append((name, row, min_err <= row.error <= max_err and lo <= row.charts <= hi))
    return out


def format_table(rows) -> str:
    lines = [f"{'tau':>12} {'error':>12} {'charts':>8}"]
    lines.extend(f"{r.tau:>12.6g} {r.error:>12.4e} {r.charts:>8d}" for r in rows)
    return "\n".join(lines)


def _default_checkpoints(af: AtlasFile) -> list:
    if af.config is not None and af.config.checkpoints:
        return list(af.config.checkpoints)
    T = af.atlas.T
    return [T * k / 5 for k in range(6)] if T else [0.0]


# ---------------------------------------------------------------------------
# command line


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    for section, key, attr, kind in _SCHEMA:
        g.add_argument("--" + key.replace("_", "-"), dest="cfg_" + attr, metavar=kind.rstrip("?").upper(),
                       help=f"[{section}] {key}")
    for a in _AXES:
        g.add_argument(f"--clip-{a}", dest=f"clip_{a}", metavar="LO,HI", help=f"[clip] {a}")


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    kinds = {a: kind for _, _, a, kind in _SCHEMA}
    for attr, kind in kinds.items():
        v = getattr(args, "cfg_" + attr)
        if v is not None:
            try:
                changes[attr] = _convert(kind, v)
            except ValueError:
                raise ConfigError(f"--{attr.replace('_', '-')} {v!r} is not a valid {kind.rstrip('?')}") from None
    axes = [getattr(args, f"clip_{a}") for a in _AXES]
    if any(v is not None for v in axes):
        base = cfg.clip or (-math.inf, math.inf) * 3
        box = list(base)
        for i, v in enumerate(axes):
            if v is not None:
                try:
                    pair = _convert("floats", v)
                except ValueError:
                    pair = ()
                if len(pair) != 2:
                    raise ConfigError(f"--clip-{_AXES[i]} needs 'lo,hi'")
                box[2 * i:2 * i + 2] = pair
        changes["clip"] = tuple(box)
    return dataclasses.replace(cfg, **changes).validate()


class _Parser(argparse.ArgumentParser):
    # bad usage is a configuration problem, not a failed validation
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lorenz-atlas", description="Validated atlases of Lorenz manifolds.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="compute and certify an atlas")
    r.add_argument("config", nargs="?", help="INI run configuration")
    r.add_argument("--out", help="atlas file (overrides [output] atlas)")
    r.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    _add_config_flags(r)

    m = sub.add_parser("export-mesh", help="write a triangle mesh of an atlas")
    m.add_argument("atlas")
    m.add_argument("--density", type=int, default=8)
    m.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="spot-check an atlas against reference trajectories")
    v.add_argument("atlas")
    v.add_argument("--samples", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tolerance", type=float, default=1e-10)

    t = sub.add_parser("table", help="print the error table of an atlas")
    t.add_argument("atlas")
    t.add_argument("--checkpoints", help="comma separated times")
    t.add_argument("--expected", help="band file; exit 2 when a row is outside its band")
    return p


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    if args.print_config:
        sys.stdout.write(serialize_config(cfg))
        return EXIT_OK
    out = args.out or cfg.atlas
    try:
        res = run(cfg, out=out)
    except CertificationError as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        if out and getattr(exc, "atlas", None) is not None:
            print(f"partial atlas written to {out}", file=sys.stderr)
        return EXIT_VALIDATION
    rows = export_tables(res.atlas, cfg.checkpoints or [0.0])
    print(format_table(rows))
    print(f"charts {res.atlas.chart_count}  max error {res.atlas.max_error():.4e}  atlas {out}")
    if cfg.table:
        Path(cfg.table).write_text(format_table(rows) + "\n")
    if cfg.mesh_file:
        export_mesh(res.file, cfg.mesh_density, cfg.mesh_file)
    return EXIT_OK


def _cmd_mesh(args) -> int:
    st = export_mesh(load_atlas(args.atlas), args.density, args.out)
    print(f"{st.objects} objects, {st.vertices} vertices, {st.faces} faces -> {args.out}")
    if st.degenerate:
        print(f"degenerate objects: {', '.join(st.degenerate)}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    rep = verify_atlas(load_atlas(args.atlas), args.samples, args.seed, args.tolerance)
    status = "pass" if rep.passed else "FAIL"
    print(f"{status}: {rep.samples} samples, max defect {rep.max_defect:.3e}, "
          f"max excess over claimed error {rep.max_excess:.3e} (chart {rep.worst_chart})")
    return EXIT_OK if rep.passed else EXIT_VALIDATION


def _cmd_table(args) -> int:
    af = load_atlas(args.atlas)
    if args.checkpoints:
        try:
            cps = list(_convert("floats", args.checkpoints))
        except ValueError:
            raise ConfigError("--checkpoints needs comma separated numbers") from None
    else:
        cps = _default_checkpoints(af)
    print(format_table(export_tables(af.atlas, cps)))
    if not args.expected:
        return EXIT_OK
    ok = True
    for name, row, good in check_bands(af.atlas, read_bands(args.expected)):
        print(f"{'pass' if good else 'FAIL'} [{name}] tau={row.tau:g} error={row.error:.4e} charts={row.charts}")
        ok &= good
    return EXIT_OK if ok else EXIT_VALIDATION


_COMMANDS = {"run": _cmd_run, "export-mesh": _cmd_mesh, "verify": _cmd_verify, "table": _cmd_table}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.verb](args)
    except (ConfigError, UsageError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AtlasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
