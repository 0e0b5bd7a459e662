"""Metrics, ablation grid, envelope expansion and dataset extraction."""

from __future__ import annotations

import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import Path, TrackDefinition, project_to_path, resample_track
from .ggv import GgvDiagram, preset
from .msnn import MsnnModel, SteerDataset
from .raceline import Raceline, generate_raceline
from .sim import CPU_COLUMNS, TRACE_COLUMNS, PlantConfig, RunTrace, StackConfig, run_closed_loop


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class RunMetrics:
    label: str
    crash: bool
    lap_times: tuple
    mean_lat_err: float
    max_lat_err: float
    rms_steer_rate: float
    max_v: float
    max_ax: float
    max_ay: float
    mean_speed_err: float
    max_speed_err: float
    cpu_mean_us: dict = field(default_factory=dict)
    cpu_p99_us: dict = field(default_factory=dict)
    partial: bool = False

    @property
    def lap_time(self) -> float | None:
        """Mean completed lap time; None after a crash or without a full lap."""
        if self.crash or not self.lap_times:
            return None
        return float(np.mean(self.lap_times))


def rms_rate(signal, rate_hz: float) -> float:
    d = np.diff(np.asarray(signal, dtype=float)) * rate_hz
    return float(np.sqrt(np.mean(d * d))) if len(d) else 0.0


def _realized_accels(trace: RunTrace):
    t = trace["t"]
    vx, vy, r = trace["vx"], trace["vy"], trace["r"]
    if len(t) < 3:
        z = np.zeros(len(t))
        return z, z
    ax = np.gradient(vx, t) - vy * r
    ay = np.gradient(vy, t) + vx * r
    return ax, ay


def compute_metrics(trace: RunTrace, raceline: Raceline, label: str = "", recompute_lateral: bool = False,
                    tick_hz: float | None = None) -> RunMetrics:
    """Summary statistics of one run against its raceline.

    The lateral error is the trace's logged projection error unless
    ``recompute_lateral`` asks for a fresh projection of every position.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    t = trace["t"]
    if tick_hz is None:
        tick_hz = 1.0 / float(np.median(np.diff(t))) if len(t) > 1 else 1.0
    if recompute_lateral:
        lat = np.array([project_to_path(raceline.path, x, y)[1] for x, y in zip(trace["x"], trace["y"])])
    else:
        lat = trace["lat_err"]
    lat = np.abs(lat)
    ax, ay = _realized_accels(trace)
    verr = np.abs(trace["vx"] - trace["v_cmd"])
    crash = bool(trace.meta.get("crash", False))
    laps = tuple(float(a) for a in trace.meta.get("lap_times", []))
    cpu_mean = {c: float(np.mean(trace[c])) for c in CPU_COLUMNS}
    cpu_p99 = {c: float(np.percentile(trace[c], 99)) for c in CPU_COLUMNS}
    return RunMetrics(
        label or str(trace.meta.get("controller", "")), crash, () if crash else laps,
        float(lat.mean()), float(lat.max()), rms_rate(trace["delta_cmd"], tick_hz),
        float(trace["vx"].max()), float(np.abs(ax).max()), float(np.abs(ay).max()),
        float(verr.mean()), float(verr.max()), cpu_mean, cpu_p99,
        partial=(not crash and not laps),
    )


# --------------------------------------------------------------------------
# Dataset extraction


def window_count(usable: int, w: int, T_s: float, tick_hz: float, stride: int = 1) -> int:
    """Number of windows of ``w + 1`` taps at period ``T_s`` in ``usable`` ticks."""
    span = round(w * T_s * tick_hz, 9)  # e.g. 11 * 0.1 * 50 is a hair above 55
    if usable - span < 1:
        return 0
    return int(math.floor((usable - span) / stride))


def _segments(t, tick):
    """Index ranges of continuous stretches (time resets or gaps break them)."""
    breaks = np.flatnonzero(np.abs(np.diff(t) - tick) > 0.5 * tick) + 1
    edges = np.concatenate([[0], breaks, [len(t)]])
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def realized_signals(trace: RunTrace, v_floor: float = 0.3):
    """Driven curvature, speed, lateral and longitudinal acceleration per tick."""
    ax, ay = _realized_accels(trace)
    vx = trace["vx"]
    rho = trace["r"] / np.maximum(vx, v_floor)
    return rho, vx.copy(), ay, ax


def extract_dataset(trace: RunTrace, w: int = 9, T_s: float = 0.05, split_ratio: float = 0.75,
                    stride: int = 1, tick_hz: float | None = None):
    """Sliding preview windows of the driven signals with the commanded steering as target.

    Window k starts at tick k*stride; tap j is the driven (curvature, speed,
    lateral and longitudinal acceleration) at ``t_k + j T_s``, linearly
    interpolated between ticks. The target is the steering command issued at
    ``t_k``. The first ``split_ratio`` of the time span trains, the rest
    validates; windows that would straddle the split or a time reset are
    dropped.
    """
    if len(trace) == 0:
        raise DatasetError("empty trace")
    if trace.meta.get("crash"):
        raise DatasetError("dataset extraction needs a run without a crash")
    t = trace["t"]
    if tick_hz is None:
        tick_hz = 1.0 / float(np.median(np.diff(t)))
    tick = 1.0 / tick_hz
    sig = realized_signals(trace)
    delta = trace["delta_cmd"]
    span_t = w * T_s
    t_split = t[0] + split_ratio * (t[-1] - t[0])
    out = {"train": [], "validation": []}
    any_window = False
    for a, b in _segments(t, tick):
        n = window_count(b - a, w, T_s, tick_hz, stride)
        if n <= 0:
            continue
        any_window = True
        ts = t[a:b]
        starts = a + np.arange(n) * stride
        taps = t[starts][:, None] + np.arange(w + 1)[None, :] * T_s
        cols = [np.interp(taps, ts, s[a:b]) for s in sig]
        t0, t1 = t[starts], t[starts] + span_t
        for name, keep in (("train", t1 <= t_split), ("validation", t0 >= t_split)):
            idx = np.flatnonzero(keep)
            if idx.size:
                out[name].append((cols[0][idx], cols[1][idx], cols[2][idx], cols[3][idx], delta[starts[idx]]))
    if not any_window:
        raise DatasetError("trace is shorter than one window")
    sets = []
    for name in ("train", "validation"):
        parts = out[name]
        if parts:
            arrs = [np.concatenate([p[i] for p in parts]) for i in range(5)]
        else:
            arrs = [np.zeros((0, w + 1))] * 4 + [np.zeros(0)]
        sets.append(SteerDataset(*arrs, split=name, T_s=T_s))
    return sets[0], sets[1]


def collect_run(track: TrackDefinition, raceline: Raceline, stack: StackConfig | None = None,
                duration: float = 24.0, plant: PlantConfig = PlantConfig(), seed: int = 0) -> RunTrace:
    """Closed-loop logging run of ``duration`` seconds (laps are not counted)."""
    stack = stack or StackConfig(controller="PP")
    return run_closed_loop(raceline, track, stack, plant, laps=10**6, seed=seed, max_time=duration)


# --------------------------------------------------------------------------
# Envelope expansion


@dataclass(frozen=True)
class Feasibility:
    lat_frac: float = 0.5  # max |lateral error| as a fraction of the narrowest half-width
    max_exits: int = 0
    max_speed_err: float = 0.5  # m/s


@dataclass(frozen=True)
class ExpansionStep:
    factor: float
    feasible: bool
    reason: str
    max_lat_err: float
    max_speed_err: float
    lap_time: float | None


def check_feasible(trace: RunTrace, raceline: Raceline, track: TrackDefinition,
                   feasibility: Feasibility = Feasibility()):
    """(feasible, reason, metrics) of one closed-loop run."""
    m = compute_metrics(trace, raceline)
    half = float(min(np.min(track.w_left), np.min(track.w_right)))
    exits = 1 if m.crash else 0
    if exits > feasibility.max_exits:
        return False, "corridor exit", m
    if trace.meta.get("timeout") or not m.lap_times:
        return False, "no completed lap", m
    if m.max_lat_err > feasibility.lat_frac * half:
        return False, "lateral error", m
    if m.max_speed_err > feasibility.max_speed_err:
        return False, "speed error", m
    return True, "", m


def _expansion_trial(base, factor, track, stack, plant, laps, seed, feasibility):
    g = base.scaled(factor, name=f"{base.name}x{factor:.4f}")
    rl = generate_raceline(track, g)
    st = replace(stack, ggv=g) if stack.fbga or stack.ggv is not None else stack
    tr = run_closed_loop(rl, track, st, plant, laps=laps, seed=seed, max_time=laps * rl.lap_time() * 3 + 5)
    ok, why, m = check_feasible(tr, rl, track, feasibility)
    return g, ExpansionStep(factor, ok, why, m.max_lat_err, m.max_speed_err, m.lap_time)


def expand_ggv(base: GgvDiagram, track: TrackDefinition, stack: StackConfig, step: float = 0.1,
               feasibility: Feasibility = Feasibility(), plant: PlantConfig = PlantConfig(), laps: int = 2,
               seed: int = 0, max_iter: int = 50, name: str | None = None):
    """Grow every acceleration limit by ``(1 + step)`` until the closed loop fails.

    Each candidate gets its own raceline. Returns the last feasible envelope
    and the search log; the base itself must be feasible.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    log = []
    g, rec = _expansion_trial(base, 1.0, track, stack, plant, laps, seed, feasibility)
    log.append(rec)
    if not rec.feasible:
        raise ValueError(f"base envelope is infeasible ({rec.reason})")
    best = 1.0
    for k in range(1, max_iter + 1):
        factor = (1.0 + step) ** k
        g, rec = _expansion_trial(base, factor, track, stack, plant, laps, seed, feasibility)
        log.append(rec)
        if not rec.feasible:
            break
        best = factor
    return base.scaled(best, name=name or base.name), log


def expansion_log_table(log) -> str:
    rows = ["factor,feasible,reason,max_lat_err_m,max_speed_err_mps,lap_time_s"]
    for r in log:
        lt = "" if r.lap_time is None else f"{r.lap_time:.4f}"
        rows.append(f"{r.factor:.6f},{int(r.feasible)},{r.reason},{r.max_lat_err:.5f},{r.max_speed_err:.5f},{lt}")
    return "\n".join(rows) + "\n"


# --------------------------------------------------------------------------
# Trace schema


class TraceSchemaError(ValueError):
    pass


def check_trace(trace: RunTrace) -> None:
    """Reject traces with missing columns, ragged rows, NaNs or a non-increasing clock."""
    missing = [c for c in TRACE_COLUMNS if c not in trace.data]
    if missing:
        raise TraceSchemaError(f"missing columns: {', '.join(missing)}")
    n = {len(trace.data[c]) for c in TRACE_COLUMNS}
    if len(n) != 1:
        raise TraceSchemaError("columns have different lengths")
    for c in TRACE_COLUMNS:
        if not np.all(np.isfinite(trace.data[c])):
            raise TraceSchemaError(f"non-finite values in {c}")
    t = trace.data["t"]
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise TraceSchemaError("time column must be strictly increasing")
    if np.any(trace.data["vx"] < 0):
        raise TraceSchemaError("negative forward speed")


# --------------------------------------------------------------------------
# Ablation grid

SUMMARY_HEADER = (
    "track", "preset", "controller", "msnn", "fbga", "crash", "laps_done", "lap_time_s",
    "mean_lat_err_m", "max_lat_err_m", "rms_steer_rate_radps", "max_v_mps", "max_ax_mps2", "max_ay_mps2",
    "mean_speed_err_mps", "max_speed_err_mps",
)
TIMING_HEADER = ("track", "preset", "controller", "msnn", "fbga", "ticks") + tuple(
    f"{c[7:]}_{k}_us" for c in CPU_COLUMNS for k in ("mean", "p99")) + ("tick_mean_us",)


@dataclass(frozen=True)
class Cell:
    preset: str
    controller: str
    msnn: bool
    fbga: bool

    @property
    def label(self) -> str:
        s = self.controller + ("+MSNN" if self.msnn else "") + ("+FBGA" if self.fbga else "")
        return f"{self.preset}/{s}"

    @property
    def slug(self) -> str:
        return self.label.replace("/", "_").replace("+", "-")


@dataclass
class AblationConfig:
    track: str = "B"  # shipped track name or track file
    presets: tuple = ("cautious",)
    controllers: tuple = ("PP", "CL")
    msnn: tuple = (False, True)
    fbga: tuple = (False, True)
    model: str | None = None  # model file, required when a cell enables the MS-NN
    laps: int = 2
    seed: int = 0
    max_time: float = 60.0
    plant: dict = field(default_factory=dict)  # PlantConfig overrides
    base_dir: str = "."  # relative paths resolve against this

    def cells(self):
        return [Cell(p, c, m, f) for p in self.presets for c in self.controllers for m in self.msnn for f in self.fbga]

    @classmethod
    def from_dict(cls, d, base_dir="."):
        known = {k: d[k] for k in d if k in cls.__dataclass_fields__}
        for k in ("presets", "controllers", "msnn", "fbga"):
            if k in known:
                known[k] = tuple(known[k])
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        known.setdefault("base_dir", base_dir)
        return cls(**known)

    def resolve(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)


def load_config(path) -> AblationConfig:
    with open(path) as f:
        d = json.load(f)
    return AblationConfig.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))


def load_track(name_or_file: str, base_dir: str = ".") -> TrackDefinition:
    from . import tracks
    from .geometry import read_track

    shipped = {"A": tracks.track_a, "B": tracks.track_b}
    if name_or_file in shipped:
        return shipped[name_or_file]()
    p = name_or_file if os.path.isabs(name_or_file) else os.path.join(base_dir, name_or_file)
    return read_track(p)


def load_preset(name_or_file: str, base_dir: str = ".") -> GgvDiagram:
    from .ggv import PRESET_NAMES, load_ggv

    if name_or_file in PRESET_NAMES:
        return preset(name_or_file)
    p = name_or_file if os.path.isabs(name_or_file) else os.path.join(base_dir, name_or_file)
    return load_ggv(p)


@dataclass
class CellResult:
    cell: Cell
    metrics: RunMetrics
    trace: RunTrace


def _run_cell(cfg: AblationConfig, cell: Cell, raceline: Raceline, track, ggv, model) -> CellResult:
    from .msnn import load_model

    if cell.msnn and model is None:
        if cfg.model is None:
            raise ValueError(f"{cell.label} enables the MS-NN but no model file is configured")
        model = load_model(cfg.resolve(cfg.model))
    stack = StackConfig(controller=cell.controller, msnn=model if cell.msnn else None, fbga=cell.fbga, ggv=ggv)
    plant = PlantConfig(**cfg.plant)
    tr = run_closed_loop(raceline, track, stack, plant, laps=cfg.laps, seed=cfg.seed, max_time=cfg.max_time)
    tr.meta["preset"] = cell.preset
    return CellResult(cell, compute_metrics(tr, raceline, cell.label, tick_hz=plant.tick_hz), tr)


def _cell_job(args):
    cfg, cell, raceline, track, ggv = args
    return _run_cell(cfg, cell, raceline, track, ggv, None)


def run_ablation(cfg: AblationConfig, jobs: int = 1, racelines: dict | None = None):
    """Run every grid cell and return the per-cell results in grid order.

    One raceline is generated per preset. A crash in one cell is recorded in
    its metrics and does not stop the grid.
    """
    track = load_track(cfg.track, cfg.base_dir)
    racelines = dict(racelines or {})
    ggvs = {}
    for p in cfg.presets:
        ggvs[p] = load_preset(p, cfg.base_dir)
        if p not in racelines:
            racelines[p] = generate_raceline(track, ggvs[p])
    work = [(cfg, c, racelines[c.preset], track, ggvs[c.preset]) for c in cfg.cells()]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_cell_job, work))
    return [_cell_job(w) for w in work]


def _num(x, fmt="{:.6f}"):
    return "" if x is None else fmt.format(x)


def summary_table(results, track_name: str = "") -> str:
    """Delimited summary; wall-clock columns are left out so the bytes are reproducible."""
    buf = io.StringIO()
    buf.write(",".join(SUMMARY_HEADER) + "\n")
    for r in results:
        m, c = r.metrics, r.cell
        row = (track_name, c.preset, c.controller, int(c.msnn), int(c.fbga), int(m.crash), len(m.lap_times),
               _num(m.lap_time), _num(m.mean_lat_err), _num(m.max_lat_err), _num(m.rms_steer_rate),
               _num(m.max_v), _num(m.max_ax), _num(m.max_ay), _num(m.mean_speed_err), _num(m.max_speed_err))
        buf.write(",".join(str(a) for a in row) + "\n")
    return buf.getvalue()


def timing_table(results, track_name: str = "") -> str:
    buf = io.StringIO()
    buf.write(",".join(TIMING_HEADER) + "\n")
    for r in results:
        m, c = r.metrics, r.cell
        vals = []
        for col in CPU_COLUMNS:
            vals += [_num(m.cpu_mean_us.get(col), "{:.2f}"), _num(m.cpu_p99_us.get(col), "{:.2f}")]
        tick = sum(m.cpu_mean_us.values())
        row = (track_name, c.preset, c.controller, int(c.msnn), int(c.fbga), len(r.trace)) + tuple(vals) + (
            _num(tick, "{:.2f}"),)
        buf.write(",".join(str(a) for a in row) + "\n")
    return buf.getvalue()


def parse_table(text: str):
    """Rows of a summary or timing table as dicts; the header must carry unit suffixes."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty table")
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise ValueError(f"ragged row: {ln!r}")
        rows.append(dict(zip(header, parts)))
    return rows


def write_ablation(results, out_dir, track_name: str = "", traces: bool = True):
    """Write summary.csv, timing.csv and one trace per cell into ``out_dir``."""
    from .sim import write_trace

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
        f.write(summary_table(results, track_name))
    with open(os.path.join(out_dir, "timing.csv"), "w", newline="") as f:
        f.write(timing_table(results, track_name))
    if traces:
        tdir = os.path.join(out_dir, "traces")
        os.makedirs(tdir, exist_ok=True)
        for r in results:
            write_trace(r.trace, os.path.join(tdir, r.cell.slug + ".csv"))


# --------------------------------------------------------------------------
# Report


def report(trace_files, out_dir, raceline: Raceline | None = None, plots: bool = True):
    """Metrics table (and static plots when matplotlib is importable) for saved traces.

    Returns the list of files written.
    """
    from .sim import read_trace

    os.makedirs(out_dir, exist_ok=True)
    traces = []
    for p in trace_files:
        tr = read_trace(p)
        check_trace(tr)
        traces.append((os.path.splitext(os.path.basename(p))[0], tr))
    header = ("run", "crash", "laps_done", "lap_time_s", "mean_lat_err_m", "max_lat_err_m",
              "rms_steer_rate_radps", "max_v_mps", "mean_speed_err_mps")
    lines = [",".join(header)]
    for name, tr in traces:
        t = tr["t"]
        tick_hz = 1.0 / float(np.median(np.diff(t))) if len(t) > 1 else 1.0
        lat = np.abs(tr["lat_err"])
        laps = [float(a) for a in tr.meta.get("lap_times", [])]
        crash = bool(tr.meta.get("crash", False))
        lt = None if crash or not laps else float(np.mean(laps))
        verr = np.abs(tr["vx"] - tr["v_cmd"])
        lines.append(",".join(str(a) for a in (
            name, int(crash), len(laps), _num(lt), _num(lat.mean()), _num(lat.max()),
            _num(rms_rate(tr["delta_cmd"], tick_hz)), _num(tr["vx"].max()), _num(verr.mean()))))
    written = [os.path.join(out_dir, "report.csv")]
    with open(written[0], "w", newline="") as f:
        f.write("\n".join(lines) + "\n")
    if not plots:
        return written
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return written

    fig, ax = plt.subplots(figsize=(7, 6))
    if raceline is not None:
        ax.plot(raceline.path.x, raceline.path.y, "k--", lw=0.8, label="raceline")
    for name, tr in traces:
        ax.plot(tr["x"], tr["y"], lw=1.0, label=name)
    ax.set_aspect("equal")
    ax.legend(fontsize=7)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    p = os.path.join(out_dir, "paths.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)

    fig, axs = plt.subplots(3, 1, figsize=(8, 8), sharex=True)
    for name, tr in traces:
        axs[0].plot(tr["t"], tr["vx"], lw=0.8, label=name)
        axs[1].plot(tr["t"], tr["lat_err"], lw=0.8)
        axs[2].plot(tr["t"], tr["delta_cmd"], lw=0.8)
    axs[0].set_ylabel("v [m/s]")
    axs[1].set_ylabel("lateral error [m]")
    axs[2].set_ylabel("steering [rad]")
    axs[2].set_xlabel("t [s]")
    axs[0].legend(fontsize=7)
    p = os.path.join(out_dir, "signals.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)
    return written
