"""Experiment drivers: the one-shot prior-accuracy sweep and the tracking run.

Both drivers split work into independent items (a grid cell or a tracking
run), give each item its own random stream keyed by its index, and reduce the
results in index order. Output bytes therefore do not depend on the number
of worker processes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import InvalidParameter, LLLError
from .expfam import InvWishartParams
from .oracle import (
    RngStream,
    importance_posterior,
    sample_gaussian,
    sample_poisson,
    sample_wishart,
)
from .randmat import (
    EXTENT_UPDATES,
    EttModel,
    ExtentBelief,
    KinematicBelief,
    MeasurementBatch,
    MotionModel,
    UpdateDiagnostics,
    measurement_update,
    time_update,
)


def _rotation_eig(values, first_axis):
    """Symmetric matrix with eigenvalue values[0] along first_axis and values[1] orthogonal to it."""
    u = np.asarray(first_axis, dtype=float)
    u = u / np.linalg.norm(u)
    w = np.array([-u[1], u[0]])
    return values[0] * np.outer(u, u) + values[1] * np.outer(w, w)


def _sweep_truth_extent():
    return _rotation_eig((300.0**2, 200.0**2), (1.0, 1.0))


# --- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    count: int
    min: float
    max: float
    scale: str = "linear"

    def __post_init__(self):
        if self.count < 1:
            raise InvalidParameter("grid count must be at least 1")
        if self.scale not in ("linear", "log"):
            raise InvalidParameter(f"unknown grid scale {self.scale!r}")
        if self.scale == "log" and not self.min > 0:
            raise InvalidParameter("logarithmic grid needs a positive minimum")
        if self.max < self.min:
            raise InvalidParameter("grid max must not be below grid min")

    def values(self) -> np.ndarray:
        if self.count == 1:
            return np.array([float(self.min)])
        if self.scale == "log":
            return np.geomspace(self.min, self.max, self.count)
        return np.linspace(self.min, self.max, self.count)


def _listify(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return [_listify(v) for v in value]
    return value


class _ConfigMixin:
    """JSON round trip with field names taken from the dataclass."""

    _nested: dict = {}

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
            elif f.name == "segments":
                v = [dataclasses.asdict(s) for s in v]
            out[f.name] = _listify(v)
        return out

    @classmethod
    def from_dict(cls, data: dict):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidParameter(f"unknown config fields: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in cls._nested:
                kind = cls._nested[key]
                if isinstance(value, list):
                    value = tuple(kind(**v) for v in value)
                else:
                    value = kind(**value)
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as err:
            raise InvalidParameter(str(err)) from None

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _matrix(value, shape, name):
    a = np.asarray(value, dtype=float)
    if a.shape != shape:
        raise InvalidParameter(f"{name} must have shape {shape}, got {a.shape}")
    return a


def _check_seed(seed):
    if not isinstance(seed, (int, np.integer)) or not 0 <= seed < 2**64:
        raise InvalidParameter("seed must be an unsigned 64-bit integer")


def _check_methods(methods):
    methods = tuple(m.upper() for m in methods)
    unknown = [m for m in methods if m not in EXTENT_UPDATES]
    if unknown or not methods:
        raise InvalidParameter(f"unknown or empty method selection: {unknown}")
    return methods


@dataclass(frozen=True)
class SweepConfig(_ConfigMixin):
    alpha: GridSpec = GridSpec(40, 1.0, 50.0, "linear")
    delta: GridSpec = GridSpec(40, 2.0, 1000.0, "log")
    n_mc: int = 1000
    oracle_samples: int = 100_000
    s: float = 0.25
    R: tuple = ((100.0**2, 0.0), (0.0, 100.0**2))
    H: tuple = ((1.0, 0.0, 0.0, 0.0), (0.0, 1.0, 0.0, 0.0))
    x0: tuple = (0.0, 0.0, 100.0, 100.0)
    X0: tuple = tuple(map(tuple, _sweep_truth_extent()))
    P_diag: tuple = (50.0**2, 50.0**2, 10.0**2, 10.0**2)
    nu_rate: float = 100.0
    nu_min: int = 7
    m_rate: float = 10.0
    m_min: int = 2
    methods: tuple = ("FFK", "ULL")
    seed: int = 0

    _nested = {"alpha": GridSpec, "delta": GridSpec}

    def __post_init__(self):
        if self.n_mc < 1:
            raise InvalidParameter("n_mc must be at least 1")
        _check_seed(self.seed)
        if self.alpha.min < 1 or self.delta.min < 2:
            raise InvalidParameter("alpha must be >= 1 and delta >= 2")
        object.__setattr__(self, "methods", _check_methods(self.methods))
        model = self.model()
        _matrix(self.x0, (model.n,), "x0")
        _matrix(self.X0, (model.d, model.d), "X0")
        _matrix(self.P_diag, (model.n,), "P_diag")

    def model(self) -> EttModel:
        return EttModel(np.asarray(self.H, dtype=float), self.s, np.asarray(self.R, dtype=float))


@dataclass(frozen=True)
class Segment:
    """Piece of the true trajectory: ``duration`` seconds turning ``turn_deg`` in total."""

    duration: float
    turn_deg: float = 0.0


DEFAULT_SEGMENTS = (
    Segment(500.0, 0.0),
    Segment(300.0, 90.0),
    Segment(300.0, 0.0),
    Segment(300.0, -90.0),
    Segment(410.0, 0.0),
)


@dataclass(frozen=True)
class TrackConfig(_ConfigMixin):
    K: int = 181
    tau: float = 10.0
    sigma_v: float = 0.1
    tau0: float = 15.0
    s: float = 0.25
    R: tuple = ((20.0**2, 0.0), (0.0, 20.0**2))
    x1: tuple = (0.0, 0.0, 9.8, -9.8)
    # extent eigenvalues along and across the heading
    extent_eig: tuple = (170.0**2, 400.0**2)
    alpha0: float = 10.0
    delta0: float = 5.0
    P_diag: tuple = (50.0**2, 50.0**2, 10.0**2, 10.0**2)
    nu_rate: float = 10.0
    nu_min: int = 7
    m_rate: float = 10.0
    m_min: int = 2
    segments: tuple = DEFAULT_SEGMENTS
    methods: tuple = ("FFK", "ULL")
    n_mc: int = 200
    clip: Optional[float] = None
    seed: int = 0

    _nested = {"segments": Segment}

    def __post_init__(self):
        if self.K < 1 or self.n_mc < 1:
            raise InvalidParameter("K and n_mc must be at least 1")
        _check_seed(self.seed)
        total = sum(seg.duration for seg in self.segments)
        if not math.isclose(total, self.K * self.tau, rel_tol=1e-9):
            raise InvalidParameter(
                f"segment durations sum to {total}, expected K * tau = {self.K * self.tau}"
            )
        if any(seg.duration <= 0 for seg in self.segments):
            raise InvalidParameter("segment durations must be positive")
        if self.clip is not None and not self.clip > 0:
            raise InvalidParameter("clip must be positive when given")
        object.__setattr__(self, "methods", _check_methods(self.methods))
        object.__setattr__(self, "segments", tuple(self.segments))

    def model(self) -> EttModel:
        H = np.hstack([np.eye(2), np.zeros((2, 2))])
        return EttModel(H, self.s, np.asarray(self.R, dtype=float))

    def motion(self) -> MotionModel:
        return MotionModel.constant_velocity(self.tau, self.sigma_v, self.tau0)


# --- error metrics -----------------------------------------------------------------


def kinematic_error(H, estimates, references) -> float:
    """``(1/(d N) sum ||H (x - x_ref)||^2)^(1/2)`` over stacked estimates."""
    diff = (np.asarray(estimates) - np.asarray(references)) @ np.asarray(H).T
    diff = np.atleast_2d(diff)
    d = diff.shape[-1]
    return float(np.sqrt(np.sum(diff**2) / (d * diff.shape[0])))


def extent_error(estimates, references) -> float:
    """``(1/(d^2 N) sum tr((X - X_ref)^2))^(1/4)``; note the fourth root."""
    diff = np.asarray(estimates) - np.asarray(references)
    if diff.ndim == 2:
        diff = diff[None]
    d = diff.shape[-1]
    total = np.einsum("nij,nji->", diff, diff)
    return float((total / (d * d * diff.shape[0])) ** 0.25)


def _extent_estimate(ext: ExtentBelief):
    return ext.scale / (ext.dof - 2 * ext.dim - 2)


# --- one-shot sweep -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class McInstance:
    kin: KinematicBelief
    ext: ExtentBelief
    batch: MeasurementBatch


def generate_mc_instance(cfg: SweepConfig, alpha, delta, stream: RngStream) -> McInstance:
    """Draw a predicted density and a measurement batch around the fixed truth."""
    if alpha < 1 or delta < 2:
        raise InvalidParameter("alpha must be >= 1 and delta >= 2")
    model = cfg.model()
    d = model.d
    x0 = np.asarray(cfg.x0, dtype=float)
    X0 = np.asarray(cfg.X0, dtype=float)
    P = np.diag(cfg.P_diag)
    x_pred = sample_gaussian(stream, x0, P / alpha)
    nu = max(cfg.nu_min, int(sample_poisson(stream, cfg.nu_rate)))
    X_mean = sample_wishart(stream, delta, X0 / delta)
    m = max(cfg.m_min, int(sample_poisson(stream, cfg.m_rate)))
    y = sample_gaussian(stream, model.H @ x0, cfg.s * X0 + model.R, m)
    return McInstance(
        KinematicBelief(x_pred, P),
        InvWishartParams(float(nu), X_mean * (nu - 2 * d - 2)),
        MeasurementBatch(y),
    )


def _run_cell(args):
    """All Monte-Carlo runs of one grid cell; returns per-method error sums."""
    cfg, cell, alpha, delta = args
    model = cfg.model()
    H = model.H
    sums = {m: [0.0, 0.0, 0, 0] for m in cfg.methods}  # sq kin, sq extent, ok, fail
    for run in range(cfg.n_mc):
        inst = generate_mc_instance(cfg, alpha, delta, RngStream(cfg.seed, (cell, run, 0)))
        try:
            ref = importance_posterior(
                inst.kin, inst.ext, model, inst.batch, cfg.oracle_samples,
                RngStream(cfg.seed, (cell, run, 1)),
            )
        except LLLError:
            for acc in sums.values():
                acc[3] += 1
            continue
        for method in cfg.methods:
            acc = sums[method]
            try:
                kin, ext = measurement_update(method, inst.kin, inst.ext, model, inst.batch)
            except LLLError:
                acc[3] += 1
                continue
            dx = H @ (kin.mean - ref.x_opt)
            dX = _extent_estimate(ext) - ref.X_opt
            acc[0] += float(dx @ dx)
            acc[1] += float(np.trace(dX @ dX))
            acc[2] += 1
    return sums


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    delta: float
    method: str
    E_x: float
    E_X: float
    n_fail: int


def _map(fn, items, workers):
    if workers is None or workers <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_sweep(cfg: SweepConfig, workers: int = 1) -> list[SweepRow]:
    """Errors of each method against the oracle on every (alpha, delta) cell."""
    alphas = cfg.alpha.values()
    deltas = cfg.delta.values()
    cells = [
        (cfg, i * len(deltas) + j, float(a), float(dl))
        for i, a in enumerate(alphas)
        for j, dl in enumerate(deltas)
    ]
    results = _map(_run_cell, cells, workers)
    d = cfg.model().d
    rows = []
    for (_, _, a, dl), sums in zip(cells, results):
        for method in cfg.methods:
            sq_x, sq_X, ok, fail = sums[method]
            if ok:
                ex = math.sqrt(sq_x / (d * ok))
                eX = (sq_X / (d * d * ok)) ** 0.25
            else:
                ex = eX = math.nan
            rows.append(SweepRow(a, dl, method, ex, eX, fail))
    return rows


# --- tracking scenario -----------------------------------------------------------------


def _heading_extent(cfg: TrackConfig, velocity):
    # a stationary target keeps the x axis as its reference direction
    axis = velocity if np.linalg.norm(velocity) > 0 else (1.0, 0.0)
    return _rotation_eig(cfg.extent_eig, axis)


def generate_trajectory(cfg: TrackConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """True (x_k, X_k) at t = (k - 1) tau for k = 1..K.

    Segments are flown at constant speed; turning segments are exact
    coordinated turns. The extent keeps its eigenvalues and rotates with the
    heading.
    """
    x1 = np.asarray(cfg.x1, dtype=float)
    starts = []
    p, v, t0 = x1[:2].copy(), x1[2:].copy(), 0.0
    for seg in cfg.segments:
        omega = math.radians(seg.turn_deg) / seg.duration
        starts.append((t0, p.copy(), v.copy(), omega))
        p, v = _advance(p, v, omega, seg.duration)
        t0 += seg.duration

    out = []
    idx = 0
    for k in range(cfg.K):
        t = k * cfg.tau
        while idx + 1 < len(starts) and t >= starts[idx + 1][0]:
            idx += 1
        ts, ps, vs, omega = starts[idx]
        pk, vk = _advance(ps, vs, omega, t - ts)
        if k == 0:
            pk, vk = x1[:2], x1[2:]
        out.append((np.concatenate([pk, vk]), _heading_extent(cfg, vk)))
    return out


def _advance(p, v, omega, dt):
    if dt == 0:
        return p.copy(), v.copy()
    perp = np.array([-v[1], v[0]])
    if omega == 0:
        return p + v * dt, v.copy()
    c, s = math.cos(omega * dt), math.sin(omega * dt)
    p_new = p + (s / omega) * v + ((1.0 - c) / omega) * perp
    v_new = c * v + s * perp
    return p_new, v_new


@dataclass(frozen=True)
class MethodRun:
    E_x: float
    E_X: float
    cycle_mean_s: float
    cycle_std_s: float
    x_final: Optional[np.ndarray] = None
    X_final: Optional[np.ndarray] = None
    spd_repairs: int = 0
    error: Optional[str] = None

    @property
    def failed(self):
        return self.error is not None


@dataclass(frozen=True)
class RunRecord:
    run_id: int
    seed: int
    stream_id: tuple
    results: dict = field(default_factory=dict)


def _track_inputs(cfg: TrackConfig, truth, stream: RngStream):
    model = cfg.model()
    d = model.d
    x1, X1 = truth[0]
    P = np.diag(cfg.P_diag)
    x_pred = sample_gaussian(stream, x1, P / cfg.alpha0)
    nu = max(cfg.nu_min, int(sample_poisson(stream, cfg.nu_rate)))
    X_mean = sample_wishart(stream, cfg.delta0, X1 / cfg.delta0)
    prior = (KinematicBelief(x_pred, P), InvWishartParams(float(nu), X_mean * (nu - 2 * d - 2)))
    batches = []
    for xk, Xk in truth:
        m = max(cfg.m_min, int(sample_poisson(stream, cfg.m_rate)))
        y = sample_gaussian(stream, model.H @ xk, cfg.s * Xk + model.R, m)
        batches.append(MeasurementBatch(y))
    return prior, batches


def _clip(value, clip):
    return value if clip is None else min(value, clip)


def _run_filter(cfg, method, prior, batches, truth, model, motion) -> MethodRun:
    kin, ext = prior
    diag = UpdateDiagnostics()
    xs, Xs, cycles = [], [], []
    try:
        for k, b in enumerate(batches):
            t0 = time.perf_counter()
            kin, ext = measurement_update(method, kin, ext, model, b, diag)
            cycles.append(time.perf_counter() - t0)
            xs.append(kin.mean)
            Xs.append(_extent_estimate(ext))
            if k + 1 < len(batches):
                kin, ext = time_update(kin, ext, motion)
    except LLLError as err:
        return MethodRun(math.nan, math.nan, math.nan, math.nan, error=f"{type(err).__name__}: {err}")
    x_true = np.array([t[0] for t in truth])
    X_true = np.array([t[1] for t in truth])
    ex = _clip(kinematic_error(model.H, np.array(xs), x_true), cfg.clip)
    eX = _clip(extent_error(np.array(Xs), X_true), cfg.clip)
    return MethodRun(
        ex, eX, float(np.mean(cycles)), float(np.std(cycles)),
        xs[-1], Xs[-1], diag.spd_repairs,
    )


def _run_track_item(args):
    cfg, run_id, truth = args
    stream = RngStream(cfg.seed, (run_id,))
    prior, batches = _track_inputs(cfg, truth, stream)
    model, motion = cfg.model(), cfg.motion()
    results = {
        method: _run_filter(cfg, method, prior, batches, truth, model, motion)
        for method in cfg.methods
    }
    return RunRecord(run_id, cfg.seed, stream.stream_id, results)


@dataclass(frozen=True)
class TrackSummary:
    method: str
    n_ok: int
    n_fail: int
    E_x_mean: float
    E_x_std: float
    E_X_mean: float
    E_X_std: float
    cycle_mean_s: float
    cycle_std_s: float

    @property
    def E_x_se(self):
        return self.E_x_std / math.sqrt(self.n_ok) if self.n_ok else math.nan

    @property
    def E_X_se(self):
        return self.E_X_std / math.sqrt(self.n_ok) if self.n_ok else math.nan


def summarize_track(records: Sequence[RunRecord], methods) -> dict[str, TrackSummary]:
    out = {}
    for method in methods:
        ok = [r.results[method] for r in records if not r.results[method].failed]
        n_fail = len(records) - len(ok)

        def stats(attr):
            if not ok:
                return math.nan, math.nan
            vals = np.array([getattr(run, attr) for run in ok])
            return float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0

        out[method] = TrackSummary(
            method, len(ok), n_fail, *stats("E_x"), *stats("E_X"), *stats("cycle_mean_s")
        )
    return out


def run_track(cfg: TrackConfig, methods=None, workers: int = 1):
    """Monte-Carlo tracking runs; all methods of a run see the same measurements.

    Returns the per-run records (ordered by run id) and a per-method summary.
    """
    if methods is not None:
        cfg = cfg.replace(methods=tuple(methods))
    truth = generate_trajectory(cfg)
    items = [(cfg, run_id, truth) for run_id in range(cfg.n_mc)]
    records = _map(_run_track_item, items, workers)
    return records, summarize_track(records, cfg.methods)


# --- serialization ------------------------------------------------------------------


def _fmt(value):
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "delta", "method", "E_x", "E_X", "n_fail"])
        for r in rows:
            w.writerow([_fmt(r.alpha), _fmt(r.delta), r.method, _fmt(r.E_x), _fmt(r.E_X), r.n_fail])


def write_track_csv(records: Sequence[RunRecord], methods, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "method", "E_x", "E_X", "cycle_mean_s"])
        for rec in records:
            for method in methods:
                res = rec.results[method]
                w.writerow([rec.run_id, method, _fmt(res.E_x), _fmt(res.E_X), _fmt(res.cycle_mean_s)])


def write_manifest(cfg, path, kind: str, extra: Optional[dict] = None) -> None:
    data = {
        "kind": kind,
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "version": __version__,
        "config": cfg.to_dict(),
    }
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
